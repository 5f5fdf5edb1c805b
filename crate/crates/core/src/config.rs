//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_set, load_dataset, Sample, SyntheticRoadConfig};
use crate::error::{Error, Result};
use crate::model::{BranchConfig, ModelConfig, NUM_STAGES};
use crate::training::TrainConfig;

/// Everything one command needs: model, optimizer, data and outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `None` derives heads from the width (one per 8 channels, doubling).
    pub heads: Option<[usize; NUM_STAGES]>,
    pub train: TrainConfig,
    pub image_size: usize,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth: SyntheticRoadConfig,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            heads: None,
            train: TrainConfig::default(),
            image_size: 64,
            train_data: None,
            val_data: None,
            test_data: None,
            out_dir: PathBuf::from("runs"),
            synth: SyntheticRoadConfig::default(),
            synth_train: 200,
            synth_val: 25,
            synth_test: 25,
            gradcheck_samples: 24,
        }
    }
}

/// Keys accepted in a config file, with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    (
        "patch_sizes",
        "comma-separated patch size per branch, anchor first (4,8)",
    ),
    ("embed_dim", "channels C of the first stage (16)"),
    ("window", "attention window side M (4)"),
    ("in_channels", "input image channels, 1 or 3 (1)"),
    ("depths", "Swin blocks per encoder stage (2,2,2,2)"),
    ("heads", "attention heads per stage, or auto (auto)"),
    ("decoder_depth", "Swin blocks per decoder stage (2)"),
    ("mlp_ratio", "MLP hidden width multiplier (4)"),
    ("aff_ratio", "fusion bottleneck reduction (4)"),
    ("lr", "initial learning rate (2e-4)"),
    ("momentum", "SGD momentum (0.9)"),
    ("weight_decay", "L2 weight decay (2e-4)"),
    ("batch_size", "samples per step (4)"),
    ("epochs", "training epochs (100)"),
    ("decay_every", "epochs between learning-rate decays (20)"),
    ("decay_factor", "learning-rate multiplier per decay (0.2)"),
    ("seed", "initialization and shuffling seed (0)"),
    ("image_size", "side of synthetic images and gradient-check inputs (64)"),
    ("train_data", "training manifest; synthetic data when unset"),
    ("val_data", "validation manifest"),
    ("test_data", "test manifest"),
    ("out_dir", "directory for logs and checkpoints (runs)"),
    ("synth_train", "synthetic training samples (200)"),
    ("synth_val", "synthetic validation samples (25)"),
    ("synth_test", "synthetic test samples (25)"),
    ("synth_seed", "synthetic data seed (0)"),
    ("roads", "roads per synthetic image, min,max (1,3)"),
    ("road_width", "road width in pixels, min,max (2,5)"),
    ("occluders", "occluding disks per image, min,max (2,6)"),
    ("occluder_radius", "occluder radius in pixels, min,max (3,7)"),
    ("buildings", "road-coloured distractor rectangles, min,max (0,3)"),
    ("noise_std", "Gaussian pixel noise std (8)"),
    ("gradcheck_samples", "parameters sampled by the gradient check (24)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_array(key: &str, value: &str) -> Result<[usize; NUM_STAGES]> {
    parse_list(key, value)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {NUM_STAGES} comma-separated values")))
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list(key, value)?[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(Error::Config(format!("{key}: expected min,max"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The pinned gradient-check model: 32×32 input, C=8, M=4, s=4,8.
    pub fn tiny() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            image_size: 32,
            synth: SyntheticRoadConfig {
                size: 32,
                ..SyntheticRoadConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Parses config text on top of the defaults. Relative paths resolve
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(p, _): &(String, String)| p == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut cfg = RunConfig::from_pairs(&pairs)?;
        for p in [&mut cfg.train_data, &mut cfg.val_data, &mut cfg.test_data]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, path.parent().unwrap_or(Path::new("")))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` pairs on top of the defaults and validates.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut patches = vec![4, 8];
        let mut embed_dim = 16;
        let mut window = 4;
        let mut depths = [2; NUM_STAGES];
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "patch_sizes" => patches = parse_list(k, v)?,
                "embed_dim" => embed_dim = parse(k, v)?,
                "window" => window = parse(k, v)?,
                "in_channels" => c.model.in_channels = parse(k, v)?,
                "depths" => depths = parse_array(k, v)?,
                "heads" => c.heads = if v == "auto" { None } else { Some(parse_array(k, v)?) },
                "decoder_depth" => c.model.decoder_depth = parse(k, v)?,
                "mlp_ratio" => c.model.mlp_ratio = parse(k, v)?,
                "aff_ratio" => c.model.aff_ratio = parse(k, v)?,
                "lr" => c.train.lr0 = parse(k, v)?,
                "momentum" => c.train.momentum = parse(k, v)?,
                "weight_decay" => c.train.weight_decay = parse(k, v)?,
                "batch_size" => c.train.batch_size = parse(k, v)?,
                "epochs" => c.train.epochs = parse(k, v)?,
                "decay_every" => c.train.decay_every = parse(k, v)?,
                "decay_factor" => c.train.decay_factor = parse(k, v)?,
                "seed" => c.train.seed = parse(k, v)?,
                "image_size" => c.image_size = parse(k, v)?,
                "train_data" => c.train_data = Some(PathBuf::from(v)),
                "val_data" => c.val_data = Some(PathBuf::from(v)),
                "test_data" => c.test_data = Some(PathBuf::from(v)),
                "out_dir" => c.out_dir = PathBuf::from(v),
                "synth_train" => c.synth_train = parse(k, v)?,
                "synth_val" => c.synth_val = parse(k, v)?,
                "synth_test" => c.synth_test = parse(k, v)?,
                "synth_seed" => c.synth.seed = parse(k, v)?,
                "roads" => c.synth.roads = parse_range(k, v)?,
                "road_width" => c.synth.width = parse_range(k, v)?,
                "occluders" => c.synth.occluders = parse_range(k, v)?,
                "occluder_radius" => c.synth.occluder_radius = parse_range(k, v)?,
                "buildings" => c.synth.buildings = parse_range(k, v)?,
                "noise_std" => c.synth.noise_std = parse(k, v)?,
                "gradcheck_samples" => c.gradcheck_samples = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        c.model.branches = patches
            .iter()
            .map(|&s| {
                let mut b = BranchConfig::new(s, embed_dim, window);
                b.depths = depths;
                if let Some(h) = c.heads {
                    b.heads = h;
                }
                b
            })
            .collect();
        c.synth.size = c.image_size;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    /// Every setting as `key = value` pairs that [`RunConfig::from_pairs`]
    /// reads back to an equal config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let a = self.model.anchor();
        let t = &self.train;
        let s = &self.synth;
        let range = |r: (usize, usize)| format!("{},{}", r.0, r.1);
        let mut out = vec![
            ("patch_sizes", self.model.patch_label()),
            ("embed_dim", a.embed_dim.to_string()),
            ("window", a.window.to_string()),
            ("in_channels", self.model.in_channels.to_string()),
            ("depths", join(&a.depths)),
            ("heads", self.heads.map_or_else(|| "auto".to_string(), |h| join(&h))),
            ("decoder_depth", self.model.decoder_depth.to_string()),
            ("mlp_ratio", self.model.mlp_ratio.to_string()),
            ("aff_ratio", self.model.aff_ratio.to_string()),
            ("lr", t.lr0.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("decay_every", t.decay_every.to_string()),
            ("decay_factor", t.decay_factor.to_string()),
            ("seed", t.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_val", self.synth_val.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_seed", s.seed.to_string()),
            ("roads", range(s.roads)),
            ("road_width", range(s.width)),
            ("occluders", range(s.occluders)),
            ("occluder_radius", range(s.occluder_radius)),
            ("buildings", range(s.buildings)),
            ("noise_std", s.noise_std.to_string()),
            ("gradcheck_samples", self.gradcheck_samples.to_string()),
        ];
        for (k, p) in [
            ("train_data", &self.train_data),
            ("val_data", &self.val_data),
            ("test_data", &self.test_data),
        ] {
            if let Some(p) = p {
                out.push((k, p.display().to_string()));
            }
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Train, validation and test samples. Manifests are used when
    /// `train_data` is set (missing val/test manifests give empty sets);
    /// otherwise one synthetic set is generated and cut in that order.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
        if let Some(train) = &self.train_data {
            let load = |p: &Option<PathBuf>| p.as_ref().map_or(Ok(Vec::new()), load_dataset);
            return Ok((load_dataset(train)?, load(&self.val_data)?, load(&self.test_data)?));
        }
        let (n_train, n_val) = (self.synth_train, self.synth_val);
        let mut all = generate_set(&self.synth, n_train + n_val + self.synth_test)?;
        let test = all.split_off(n_train + n_val);
        let val = all.split_off(n_train);
        Ok((all, val, test))
    }

    /// Documentation of every key, for `--help`.
    pub fn schema() -> String {
        let mut s = String::from("Config file keys (key = value, # comments):\n");
        for (k, d) in KEYS {
            let _ = writeln!(s, "  {k:<18} {d}");
        }
        s
    }
}
