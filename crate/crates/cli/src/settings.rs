//! Flag and config-file resolution. Precedence: explicit flags, then the
//! key=value file named by `--config`, then built-in defaults. File keys are
//! the flag names without the leading dashes, so a config file is a
//! diff-able record of exactly the flags it stands in for.

use clap::Args;
use cpa_core::backbone::BackboneConfig;
use cpa_core::model::{ModelConfig, Variant};
use cpa_core::PipelineError;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Tiny,
    Small,
}

impl Backbone {
    pub fn config(self) -> BackboneConfig {
        match self {
            Backbone::Tiny => BackboneConfig::default(),
            Backbone::Small => BackboneConfig {
                stage_depths: [2, 2, 2, 2],
                ..BackboneConfig::default()
            },
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Tiny => "tiny",
            Backbone::Small => "small",
        })
    }
}

impl FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Backbone::Tiny),
            "small" => Ok(Backbone::Small),
            other => Err(format!("unknown backbone '{other}' (tiny|small)")),
        }
    }
}

/// Every flag, shared by all subcommands. All optional so that file values
/// and defaults can fill the gaps.
#[derive(Args, Clone, Debug, Default)]
pub struct Opts {
    /// Flat key=value settings file; explicit flags override its entries
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed for data generation, initialization, and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model variant: baseline | sa | cpa [default: cpa]
    #[arg(long)]
    pub variant: Option<String>,
    /// Backbone size: tiny | small [default: tiny]
    #[arg(long)]
    pub backbone: Option<String>,
    /// Dataset directory; for infer and attn-export, an input .ppm raster [default: data]
    #[arg(long, value_name = "PATH")]
    pub data_root: Option<PathBuf>,
    /// Output directory for checkpoints, tables, and rasters [default: out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training epochs [default: 35 for train, 6 for ablate]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 4]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square crop extent in pixels [default: 500]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Tiling stride in pixels [default: the crop extent, i.e. no overlap]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Worker threads for tiled inference [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
}

pub const FILE_KEYS: [&str; 10] = [
    "seed", "variant", "backbone", "data-root", "out", "epochs", "batch", "crop", "stride",
    "threads",
];

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| {
            PipelineError::Invalid(format!("{}:{}: {detail}", path.display(), ln + 1))
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if !FILE_KEYS.contains(&key) {
            return Err(bad(format!(
                "unknown key '{key}' (known: {})",
                FILE_KEYS.join(", ")
            )));
        }
        if value.is_empty() {
            return Err(bad(format!("empty value for '{key}'")));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(bad(format!("duplicate key '{key}'")));
        }
    }
    Ok(map)
}

fn parsed<T: FromStr>(key: &str, raw: &str) -> Result<T, PipelineError>
where
    T::Err: fmt::Display,
{
    raw.parse()
        .map_err(|e| PipelineError::Invalid(format!("{key} '{raw}': {e}")))
}

/// Fully resolved run settings. `epochs`/`batch`/`crop`/`stride` stay
/// optional: their defaults differ per subcommand.
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub variant: Variant,
    pub backbone: Backbone,
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub crop: Option<usize>,
    pub stride: Option<usize>,
    pub threads: usize,
}

pub fn resolve(opts: &Opts) -> Result<Settings, PipelineError> {
    let file = match &opts.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    // Flag wins, else file value, else none — parse with one code path so a
    // file and a flag reject exactly the same inputs.
    let pick = |flag: &Option<String>, key: &str| -> Option<String> {
        flag.clone().or_else(|| file.get(key).cloned())
    };
    let pick_num = |flag: Option<usize>, key: &str| -> Result<Option<usize>, PipelineError> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => file.get(key).map(|raw| parsed(key, raw)).transpose(),
        }
    };

    let seed = match opts.seed {
        Some(v) => v,
        None => file.get("seed").map(|r| parsed("seed", r)).transpose()?.unwrap_or(0),
    };
    let variant = match pick(&opts.variant, "variant") {
        Some(raw) => parsed::<Variant>("variant", &raw)?,
        None => Variant::Cpa,
    };
    let backbone = match pick(&opts.backbone, "backbone") {
        Some(raw) => parsed::<Backbone>("backbone", &raw)?,
        None => Backbone::Tiny,
    };
    let data_root = opts
        .data_root
        .clone()
        .or_else(|| file.get("data-root").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let out = opts
        .out
        .clone()
        .or_else(|| file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let settings = Settings {
        seed,
        variant,
        backbone,
        data_root,
        out,
        epochs: pick_num(opts.epochs, "epochs")?,
        batch: pick_num(opts.batch, "batch")?,
        crop: pick_num(opts.crop, "crop")?,
        stride: pick_num(opts.stride, "stride")?,
        threads: pick_num(opts.threads, "threads")?.unwrap_or(1),
    };
    if settings.threads == 0 {
        return Err(PipelineError::Invalid("threads must be >= 1".into()));
    }
    Ok(settings)
}

impl Settings {
    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.backbone)
    }

    /// Same settings with an explicit backbone, for commands that sweep both.
    pub fn model_config_for(&self, backbone: Backbone) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            backbone: backbone.config(),
            init_seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn defaults_without_flags_or_file() {
        let s = resolve(&Opts::default()).unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.variant, Variant::Cpa);
        assert_eq!(s.backbone, Backbone::Tiny);
        assert_eq!(s.data_root, PathBuf::from("data"));
        assert_eq!(s.threads, 1);
        assert_eq!(s.epochs, None);
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let conf = write_config(
            &dir,
            "# experiment record\nseed = 7\nvariant = sa\nepochs = 3\ncrop=64\n",
        );
        let opts = Opts {
            config: Some(conf),
            variant: Some("baseline".into()),
            ..Opts::default()
        };
        let s = resolve(&opts).unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.variant, Variant::Baseline);
        assert_eq!(s.epochs, Some(3));
        assert_eq!(s.crop, Some(64));
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let conf = write_config(&dir, "seed=1\nlearning-rate=0.1\n");
        let err = resolve(&Opts {
            config: Some(conf),
            ..Opts::default()
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("learning-rate"), "{msg}");
    }

    #[test]
    fn bad_value_and_duplicate_key_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let conf = write_config(&dir, "epochs=soon\n");
        let err = resolve(&Opts {
            config: Some(conf.clone()),
            ..Opts::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("epochs 'soon'"), "{err}");

        let conf = write_config(&dir, "seed=1\nseed=2\n");
        let err = resolve(&Opts {
            config: Some(conf),
            ..Opts::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("duplicate key 'seed'"), "{err}");
    }

    #[test]
    fn small_backbone_deepens_every_stage() {
        let s = resolve(&Opts {
            backbone: Some("small".into()),
            ..Opts::default()
        })
        .unwrap();
        assert_eq!(s.backbone, Backbone::Small);
        assert_eq!(s.model_config().backbone.stage_depths, [2, 2, 2, 2]);
    }

    #[test]
    fn zero_threads_is_rejected() {
        let err = resolve(&Opts {
            threads: Some(0),
            ..Opts::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("threads"), "{err}");
    }
}
