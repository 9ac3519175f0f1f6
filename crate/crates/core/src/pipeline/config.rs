//! Line-based `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! missing keys take the defaults below. `sampler.m_frac` and `sampler.steps`
//! apply to both stages unless `sampler.stage2.*` overrides them.
//!
//! | key | default |
//! |-----|---------|
//! | `schedule.beta_min`, `schedule.beta_max`, `schedule.T` | 0.1, 20, 1 |
//! | `sampler.m_frac`, `sampler.steps` | 0.4, 200 |
//! | `sampler.stage2.m_frac`, `sampler.stage2.steps` | stage-1 values |
//! | `sampler.k` | 1 |
//! | `sampler.mode` | `two_stage` (`variant1`, `variant2`, `sdedit`) |
//! | `sampler.mixup_ratio` | 0.7 |
//! | `sampler.appearance_sign` | `minimize` (`literal`) |
//! | `energy.lambda_g`, `energy.lambda_a` | 0.1, 2 |
//! | `energy.similarity` | `l2` (`l1`) |
//! | `lowpass.factor` | `auto` (64 at 256 px, scaled with height, min 2) |
//! | `pyramid.seed` | 0 |
//! | `score.backend` | `net` (`gmm`) |
//! | `score.gmm_variance` | 0.01 |
//! | `score.output` | `denoiser` (`inverse_sigma`, `direct`) |
//! | `train.learning_rate`, `train.batch_size`, `train.iterations` | 0.01, 128, 20000 |
//! | `train.t_min_frac`, `train.seed`, `train.log_interval` | 0.01, 0, 100 |
//! | `train.weighting` | `data_space` (`sigma_squared`, `unweighted`) |
//! | `dataset.size`, `dataset.count`, `dataset.jitter`, `dataset.seed` | 32, 64, 0, 0 |
//! | `dataset.shapes` | `ellipse,triangle,rectangle,blob` |
//! | `paths.<name>` | none |
//! | `seed` | 0 |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::energy::{EdgeExtractor, EnergySuite, EnergyWeights, FeaturePyramid, LowPass, Similarity};
use crate::error::{Error, Result};
use crate::sampler::{SamplerConfig, StagePlan};
use crate::score::{OutputScale, TrainConfig};
use crate::sde::SdeSchedule;

use super::dataset::{ShapeKind, ToyDatasetSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreBackend {
    /// Trained MLP loaded from `paths.checkpoint`.
    #[default]
    Net,
    /// Exact score of an isotropic mixture centred on the `paths.dataset` photos.
    Gmm,
}

impl fmt::Display for ScoreBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreBackend::Net => "net",
            ScoreBackend::Gmm => "gmm",
        })
    }
}

impl FromStr for ScoreBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net" => Ok(ScoreBackend::Net),
            "gmm" => Ok(ScoreBackend::Gmm),
            other => Err(Error::Config(format!("unknown score backend `{other}` (gmm|net)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub schedule: SdeSchedule,
    /// Sampler settings; `sampler.seed` is the top-level `seed` key.
    pub sampler: SamplerConfig,
    pub similarity: Similarity,
    /// `None` picks the factor from the image height.
    pub lowpass_factor: Option<usize>,
    pub pyramid_seed: u64,
    pub backend: ScoreBackend,
    pub gmm_variance: f64,
    pub output: OutputScale,
    pub train: TrainConfig,
    pub dataset: ToyDatasetSpec,
    pub paths: BTreeMap<String, PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schedule: SdeSchedule::default(),
            sampler: SamplerConfig::default(),
            similarity: Similarity::L2,
            lowpass_factor: None,
            pyramid_seed: 0,
            backend: ScoreBackend::Net,
            gmm_variance: 0.01,
            output: OutputScale::default(),
            train: TrainConfig::default(),
            dataset: ToyDatasetSpec::default(),
            paths: BTreeMap::new(),
        }
    }
}

const KEYS: &[&str] = &[
    "schedule.beta_min",
    "schedule.beta_max",
    "schedule.T",
    "sampler.m_frac",
    "sampler.steps",
    "sampler.stage2.m_frac",
    "sampler.stage2.steps",
    "sampler.k",
    "sampler.mode",
    "sampler.mixup_ratio",
    "sampler.appearance_sign",
    "energy.lambda_g",
    "energy.lambda_a",
    "energy.similarity",
    "lowpass.factor",
    "pyramid.seed",
    "score.backend",
    "score.gmm_variance",
    "score.output",
    "train.learning_rate",
    "train.batch_size",
    "train.iterations",
    "train.t_min_frac",
    "train.seed",
    "train.log_interval",
    "train.weighting",
    "dataset.size",
    "dataset.count",
    "dataset.jitter",
    "dataset.seed",
    "dataset.shapes",
    "seed",
];

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::ConfigParse {
        line,
        message: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn parse_enum<T: FromStr<Err = Error>>(line: usize, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::ConfigParse {
        line,
        message: e.to_string(),
    })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: n,
                message: format!("expected `key = value`, got `{t}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let known = KEYS.contains(&k) || (k.starts_with("paths.") && k.len() > "paths.".len());
            if !known {
                return Err(Error::UnknownKey {
                    line: n,
                    key: k.to_string(),
                });
            }
            if raw.insert(k.to_string(), (n, v.to_string())).is_some() {
                return Err(Error::ConfigParse {
                    line: n,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        let mut c = Config::default();
        let mut stage2_m = None;
        let mut stage2_steps = None;
        for (k, (n, v)) in &raw {
            let (n, v) = (*n, v.as_str());
            match k.as_str() {
                "schedule.beta_min" | "schedule.beta_max" | "schedule.T" => {}
                "sampler.m_frac" => c.sampler.stage1.m_frac = parse_value(n, k, v)?,
                "sampler.steps" => c.sampler.stage1.steps = parse_value(n, k, v)?,
                "sampler.stage2.m_frac" => stage2_m = Some(parse_value(n, k, v)?),
                "sampler.stage2.steps" => stage2_steps = Some(parse_value(n, k, v)?),
                "sampler.k" => c.sampler.repeats = parse_value(n, k, v)?,
                "sampler.mode" => c.sampler.mode = parse_enum(n, v)?,
                "sampler.mixup_ratio" => c.sampler.mixup_ratio = parse_value(n, k, v)?,
                "sampler.appearance_sign" => c.sampler.appearance_sign = parse_enum(n, v)?,
                "energy.lambda_g" => c.sampler.weights.lambda_g = parse_value(n, k, v)?,
                "energy.lambda_a" => c.sampler.weights.lambda_a = parse_value(n, k, v)?,
                "energy.similarity" => c.similarity = parse_enum(n, v)?,
                "lowpass.factor" => c.lowpass_factor = if v == "auto" { None } else { Some(parse_value(n, k, v)?) },
                "pyramid.seed" => c.pyramid_seed = parse_value(n, k, v)?,
                "score.backend" => c.backend = parse_enum(n, v)?,
                "score.gmm_variance" => c.gmm_variance = parse_value(n, k, v)?,
                "score.output" => c.output = parse_enum(n, v)?,
                "train.learning_rate" => c.train.learning_rate = parse_value(n, k, v)?,
                "train.batch_size" => c.train.batch_size = parse_value(n, k, v)?,
                "train.iterations" => c.train.iterations = parse_value(n, k, v)?,
                "train.t_min_frac" => c.train.t_min_frac = parse_value(n, k, v)?,
                "train.seed" => c.train.seed = parse_value(n, k, v)?,
                "train.log_interval" => c.train.log_interval = parse_value(n, k, v)?,
                "train.weighting" => c.train.weighting = parse_enum(n, v)?,
                "dataset.size" => c.dataset.size = parse_value(n, k, v)?,
                "dataset.count" => c.dataset.count = parse_value(n, k, v)?,
                "dataset.jitter" => c.dataset.jitter = parse_value(n, k, v)?,
                "dataset.seed" => c.dataset.seed = parse_value(n, k, v)?,
                "dataset.shapes" => {
                    c.dataset.shapes = v
                        .split(',')
                        .map(|s| parse_enum::<ShapeKind>(n, s.trim()))
                        .collect::<Result<_>>()?
                }
                "seed" => c.sampler.seed = parse_value(n, k, v)?,
                path => {
                    let name = path.strip_prefix("paths.").expect("checked against KEYS");
                    c.paths.insert(name.to_string(), PathBuf::from(v));
                }
            }
        }
        c.sampler.stage2 = StagePlan {
            m_frac: stage2_m.unwrap_or(c.sampler.stage1.m_frac),
            steps: stage2_steps.unwrap_or(c.sampler.stage1.steps),
        };
        let sched_val =
            |key: &str, d: f64| -> Result<f64> { raw.get(key).map_or(Ok(d), |(n, v)| parse_value(*n, key, v)) };
        let d = SdeSchedule::default();
        c.schedule = SdeSchedule::new(
            sched_val("schedule.beta_min", d.beta_min())?,
            sched_val("schedule.beta_max", d.beta_max())?,
            sched_val("schedule.T", d.horizon())?,
        )?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        if self.lowpass_factor == Some(0) {
            return Err(Error::Config("lowpass.factor must be >= 1".into()));
        }
        if !(self.gmm_variance > 0.0 && self.gmm_variance.is_finite()) {
            return Err(Error::Config(format!(
                "score.gmm_variance must be > 0, got {}",
                self.gmm_variance
            )));
        }
        Ok(())
    }

    /// Every key in fixed order. Floats use the shortest representation that
    /// parses back to the same value, so `parse(render(c)) == c`.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.sampler;
        let t = &self.train;
        let mut out: Vec<(String, String)> = vec![
            ("schedule.beta_min".into(), format!("{:?}", self.schedule.beta_min())),
            ("schedule.beta_max".into(), format!("{:?}", self.schedule.beta_max())),
            ("schedule.T".into(), format!("{:?}", self.schedule.horizon())),
            ("sampler.m_frac".into(), format!("{:?}", s.stage1.m_frac)),
            ("sampler.steps".into(), s.stage1.steps.to_string()),
            ("sampler.stage2.m_frac".into(), format!("{:?}", s.stage2.m_frac)),
            ("sampler.stage2.steps".into(), s.stage2.steps.to_string()),
            ("sampler.k".into(), s.repeats.to_string()),
            ("sampler.mode".into(), s.mode.to_string()),
            ("sampler.mixup_ratio".into(), format!("{:?}", s.mixup_ratio)),
            ("sampler.appearance_sign".into(), s.appearance_sign.to_string()),
            ("energy.lambda_g".into(), format!("{:?}", s.weights.lambda_g)),
            ("energy.lambda_a".into(), format!("{:?}", s.weights.lambda_a)),
            ("energy.similarity".into(), self.similarity.to_string()),
            (
                "lowpass.factor".into(),
                self.lowpass_factor.map_or("auto".to_string(), |f| f.to_string()),
            ),
            ("pyramid.seed".into(), self.pyramid_seed.to_string()),
            ("score.backend".into(), self.backend.to_string()),
            ("score.gmm_variance".into(), format!("{:?}", self.gmm_variance)),
            ("score.output".into(), self.output.to_string()),
            ("train.learning_rate".into(), format!("{:?}", t.learning_rate)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.iterations".into(), t.iterations.to_string()),
            ("train.t_min_frac".into(), format!("{:?}", t.t_min_frac)),
            ("train.seed".into(), t.seed.to_string()),
            ("train.log_interval".into(), t.log_interval.to_string()),
            ("train.weighting".into(), t.weighting.to_string()),
            ("dataset.size".into(), self.dataset.size.to_string()),
            ("dataset.count".into(), self.dataset.count.to_string()),
            ("dataset.jitter".into(), format!("{:?}", self.dataset.jitter)),
            ("dataset.seed".into(), self.dataset.seed.to_string()),
            (
                "dataset.shapes".into(),
                self.dataset
                    .shapes
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        for (k, p) in &self.paths {
            out.push((format!("paths.{k}"), p.display().to_string()));
        }
        out.push(("seed".into(), s.seed.to_string()));
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 of [`Config::render`], hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn path(&self, name: &str) -> Result<&Path> {
        self.paths
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("missing `paths.{name}`")))
    }

    pub fn weights(&self) -> EnergyWeights {
        self.sampler.weights
    }

    /// Extractors for `channels x height x height` images.
    pub fn energies(&self, channels: usize, height: usize) -> Result<EnergySuite> {
        let lowpass = match self.lowpass_factor {
            Some(f) => LowPass::new(f)?,
            None => LowPass::for_height(height),
        };
        Ok(EnergySuite {
            edge: EdgeExtractor::default(),
            lowpass,
            pyramid: FeaturePyramid::new(self.pyramid_seed, channels)?,
            similarity: self.similarity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::StageMode;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.sampler.weights.lambda_g, 0.1);
        assert_eq!(c.sampler.weights.lambda_a, 2.0);
        assert_eq!(
            c.sampler.stage1,
            StagePlan {
                m_frac: 0.4,
                steps: 200
            }
        );
        assert_eq!(c.sampler.stage2, c.sampler.stage1);
        assert_eq!(c.sampler.repeats, 1);
    }

    #[test]
    fn values_comments_and_overrides() {
        let text = "# run\n\nenergy.lambda_g = 0.5\nsampler.m_frac=0.3\nsampler.stage2.steps = 50\n\
                    sampler.mode = variant2\nlowpass.factor = 4\npaths.dataset = data/toy\nseed = 9\n\
                    schedule.beta_max = 10\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.sampler.weights.lambda_g, 0.5);
        assert_eq!(
            c.sampler.stage1,
            StagePlan {
                m_frac: 0.3,
                steps: 200
            }
        );
        assert_eq!(c.sampler.stage2, StagePlan { m_frac: 0.3, steps: 50 });
        assert_eq!(c.sampler.mode, StageMode::Variant2);
        assert_eq!(c.lowpass_factor, Some(4));
        assert_eq!(c.path("dataset").unwrap(), Path::new("data/toy"));
        assert_eq!(c.sampler.seed, 9);
        assert_eq!(c.schedule.beta_max(), 10.0);
        assert!(c.path("checkpoint").is_err());
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(
            Config::parse("seed = 1\nenergy.lambda_q = 2\n"),
            Err(Error::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("\nsampler.steps = many\n"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("seed 3\n"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("seed = 1\nseed = 2\n"),
            Err(Error::ConfigParse { line: 2, .. })
        ));
        assert!(matches!(
            Config::parse("energy.similarity = l3\n"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        assert!(matches!(Config::parse("paths. = x\n"), Err(Error::UnknownKey { .. })));
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(matches!(Config::parse("energy.lambda_g = -1\n"), Err(Error::Config(_))));
        assert!(Config::parse("sampler.m_frac = 1.5\n").is_err());
        assert!(Config::parse("sampler.k = 0\n").is_err());
        assert!(Config::parse("schedule.beta_min = 30\n").is_err());
        assert!(Config::parse("lowpass.factor = 0\n").is_err());
        assert!(Config::parse("score.gmm_variance = 0\n").is_err());
    }

    #[test]
    fn render_parse_round_trip_and_hash() {
        let mut c = Config::default();
        c.sampler.weights.lambda_g = 0.1 + 0.2;
        c.sampler.stage2.steps = 77;
        c.paths.insert("out".into(), PathBuf::from("/tmp/x y"));
        c.dataset.shapes = vec![ShapeKind::Blob, ShapeKind::Ellipse];
        let back = Config::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.pyramid_seed += 1;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn energies_follow_config() {
        let c = Config::parse("lowpass.factor = 2\npyramid.seed = 4\nenergy.similarity = l1\n").unwrap();
        let en = c.energies(3, 16).unwrap();
        assert_eq!(en.lowpass.factor(), 2);
        assert_eq!(en.pyramid.seed(), 4);
        assert_eq!(en.similarity, Similarity::L1);
        assert_eq!(Config::default().energies(3, 16).unwrap().lowpass.factor(), 4);
    }
}
