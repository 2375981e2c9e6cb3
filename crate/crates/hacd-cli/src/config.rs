//! Plain-text `key = value` run configuration with `#` comments.
//!
//! One flat key namespace covers the scene generator, the network
//! architecture, training, and the classical detectors. Unknown keys are
//! rejected with the nearest valid key named.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hacd_core::error::{Error, Result};
use hacd_core::mtcnet::{ArchConfig, FeatureTap, TrainConfig};
use hacd_core::scene::SceneSpec;

/// Union of every tunable the CLI accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Ridge for the classical detectors.
    pub reg_eps: f64,
    /// Reweighting rounds for slow feature analysis.
    pub usfa_iterations: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        RunConfig {
            scene: SceneSpec {
                seed,
                ..SceneSpec::default()
            },
            arch: ArchConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            reg_eps: 1e-6,
            usfa_iterations: 5,
            seed,
        }
    }
}

const KEYS: &[&str] = &[
    "height",
    "width",
    "bands",
    "n_endmembers",
    "segment_count",
    "gain_min",
    "gain_max",
    "bias_min",
    "bias_max",
    "illumination_amplitude",
    "noise_sigma",
    "anomaly_count",
    "anomaly_radius",
    "c1",
    "c2",
    "kernel",
    "proj_dims",
    "pred_dims",
    "cbam_reduction",
    "patch_size",
    "feature_tap",
    "epochs",
    "batch_size",
    "base_lr",
    "momentum",
    "shuffle",
    "reg_eps",
    "usfa_iterations",
    "seed",
];

fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut current = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        current[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            current[j + 1] = substitution.min(prev[j + 1] + 1).min(current[j] + 1);
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

fn nearest_key(key: &str) -> &'static str {
    KEYS.iter().min_by_key(|k| edit_distance(key, k)).unwrap()
}

struct Entry<'a> {
    key: String,
    value: &'a str,
    line: usize,
}

fn parse_entries<'a>(text: &'a str, path: &Path) -> Result<Vec<Entry<'a>>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `key = value`, got {:?}", line),
            });
        };
        let key = line[..eq].trim().to_ascii_lowercase();
        let value = line[eq + 1..].trim();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!(
                    "unknown key {:?}; nearest valid key is {:?}",
                    key,
                    nearest_key(&key)
                ),
            });
        }
        entries.push(Entry {
            key,
            value,
            line: lineno + 1,
        });
    }
    Ok(entries)
}

fn type_error(path: &Path, entry: &Entry<'_>, expected: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line: entry.line,
        message: format!(
            "key {:?} expects {}, got {:?}",
            entry.key, expected, entry.value
        ),
    }
}

/// Parse a config file over the defaults. Every key is optional; an empty
/// file yields the full default configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config_text(&text, path)
}

pub fn parse_config_text(text: &str, path: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    for entry in parse_entries(text, path)? {
        apply_entry(&mut config, &entry, path)?;
    }
    config.scene.seed = config.seed;
    config.train.seed = config.seed;
    Ok(config)
}

fn apply_entry(config: &mut RunConfig, entry: &Entry<'_>, path: &Path) -> Result<()> {
    let usize_value = || -> Result<usize> {
        entry
            .value
            .parse()
            .map_err(|_| type_error(path, entry, "a nonnegative integer"))
    };
    let f64_value = || -> Result<f64> {
        entry
            .value
            .parse()
            .map_err(|_| type_error(path, entry, "a real number"))
    };
    let u64_value = || -> Result<u64> {
        entry
            .value
            .parse()
            .map_err(|_| type_error(path, entry, "a nonnegative integer"))
    };
    let list = |n: usize| -> Result<Vec<usize>> {
        let parts: Vec<usize> = entry
            .value
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| type_error(path, entry, "a comma-separated integer list"))?;
        if parts.len() != n {
            return Err(type_error(
                path,
                entry,
                &format!("{} comma-separated integers", n),
            ));
        }
        Ok(parts)
    };
    match entry.key.as_str() {
        "height" => config.scene.height = usize_value()?,
        "width" => config.scene.width = usize_value()?,
        "bands" => config.scene.bands = usize_value()?,
        "n_endmembers" => config.scene.n_endmembers = usize_value()?,
        "segment_count" => config.scene.segment_count = usize_value()?,
        "gain_min" => config.scene.gain_range.0 = f64_value()?,
        "gain_max" => config.scene.gain_range.1 = f64_value()?,
        "bias_min" => config.scene.bias_range.0 = f64_value()?,
        "bias_max" => config.scene.bias_range.1 = f64_value()?,
        "illumination_amplitude" => config.scene.illumination_amplitude = f64_value()?,
        "noise_sigma" => config.scene.noise_sigma = f64_value()?,
        "anomaly_count" => config.scene.anomaly_count = usize_value()?,
        "anomaly_radius" => config.scene.anomaly_radius = usize_value()?,
        "c1" => config.arch.c1 = usize_value()?,
        "c2" => config.arch.c2 = usize_value()?,
        "kernel" => {
            let k = list(3)?;
            config.arch.kernel = (k[0], k[1], k[2]);
        }
        "proj_dims" => {
            let d = list(3)?;
            config.arch.proj_dims = [d[0], d[1], d[2]];
        }
        "pred_dims" => {
            let d = list(2)?;
            config.arch.pred_dims = [d[0], d[1]];
        }
        "cbam_reduction" => config.arch.cbam_reduction = usize_value()?,
        "patch_size" => config.arch.patch_size = usize_value()?,
        "feature_tap" => {
            config.arch.feature_tap = match entry.value {
                "after_attention" => FeatureTap::AfterAttention,
                "before_attention" => FeatureTap::BeforeAttention,
                _ => {
                    return Err(type_error(
                        path,
                        entry,
                        "one of after_attention|before_attention",
                    ))
                }
            }
        }
        "epochs" => config.train.epochs = usize_value()?,
        "batch_size" => config.train.batch_size = usize_value()?,
        "base_lr" => config.train.base_lr = f64_value()?,
        "momentum" => config.train.momentum = f64_value()?,
        "shuffle" => {
            config.train.shuffle = match entry.value {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                _ => return Err(type_error(path, entry, "a boolean (true|false)")),
            }
        }
        "reg_eps" => config.reg_eps = f64_value()?,
        "usfa_iterations" => config.usfa_iterations = usize_value()?,
        "seed" => config.seed = u64_value()?,
        _ => unreachable!("key set is validated in parse_entries"),
    }
    Ok(())
}

/// Serialize the architecture and training blocks as the checkpoint sidecar.
pub fn sidecar_text(config: &RunConfig) -> String {
    let a = &config.arch;
    let t = &config.train;
    let mut out = String::new();
    let _ = writeln!(out, "c1 = {}", a.c1);
    let _ = writeln!(out, "c2 = {}", a.c2);
    let _ = writeln!(out, "kernel = {},{},{}", a.kernel.0, a.kernel.1, a.kernel.2);
    let _ = writeln!(
        out,
        "proj_dims = {},{},{}",
        a.proj_dims[0], a.proj_dims[1], a.proj_dims[2]
    );
    let _ = writeln!(out, "pred_dims = {},{}", a.pred_dims[0], a.pred_dims[1]);
    let _ = writeln!(out, "cbam_reduction = {}", a.cbam_reduction);
    let _ = writeln!(out, "patch_size = {}", a.patch_size);
    let tap = match a.feature_tap {
        FeatureTap::AfterAttention => "after_attention",
        FeatureTap::BeforeAttention => "before_attention",
    };
    let _ = writeln!(out, "feature_tap = {}", tap);
    let _ = writeln!(out, "epochs = {}", t.epochs);
    let _ = writeln!(out, "batch_size = {}", t.batch_size);
    let _ = writeln!(out, "base_lr = {}", t.base_lr);
    let _ = writeln!(out, "momentum = {}", t.momentum);
    let _ = writeln!(out, "seed = {}", config.seed);
    out
}

/// Read a sidecar back into a config (unlisted keys keep defaults).
pub fn parse_sidecar(path: &Path) -> Result<RunConfig> {
    parse_config(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fake_path() -> PathBuf {
        PathBuf::from("test.cfg")
    }

    #[test]
    fn empty_file_gives_all_defaults() {
        let config = parse_config_text("", &fake_path()).unwrap();
        assert_eq!(config, RunConfig::default());
        // The headline defaults.
        assert_eq!(config.arch.patch_size, 31);
        assert_eq!(config.train.epochs, 100);
        assert_eq!(config.train.batch_size, 128);
        assert_eq!(config.train.base_lr, 0.05);
    }

    #[test]
    fn single_override_touches_only_that_key() {
        let config = parse_config_text("epochs = 5\n", &fake_path()).unwrap();
        assert_eq!(config.train.epochs, 5);
        let defaults = RunConfig::default();
        assert_eq!(config.train.batch_size, defaults.train.batch_size);
        assert_eq!(config.arch, defaults.arch);
    }

    #[test]
    fn type_error_names_the_key() {
        let err = parse_config_text("epochs = soon\n", &fake_path()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("epochs"), "{}", text);
        assert!(text.contains("integer"), "{}", text);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = parse_config_text("epoch = 5\n", &fake_path()).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("epoch"), "{}", text);
        assert!(text.contains("epochs"), "{}", text);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# scene\nheight = 32 # pixels\n\nwidth = 48\n";
        let config = parse_config_text(text, &fake_path()).unwrap();
        assert_eq!(config.scene.height, 32);
        assert_eq!(config.scene.width, 48);
    }

    #[test]
    fn seed_propagates_to_scene_and_train() {
        let config = parse_config_text("seed = 99\n", &fake_path()).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.scene.seed, 99);
        assert_eq!(config.train.seed, 99);
    }

    #[test]
    fn lists_parse_and_reject_wrong_arity() {
        let config = parse_config_text("proj_dims = 64, 64, 32\n", &fake_path()).unwrap();
        assert_eq!(config.arch.proj_dims, [64, 64, 32]);
        assert!(parse_config_text("proj_dims = 64, 64\n", &fake_path()).is_err());
    }

    #[test]
    fn sidecar_round_trips_arch_and_train() {
        let mut config = RunConfig::default();
        config.arch.c1 = 4;
        config.arch.proj_dims = [32, 32, 16];
        config.arch.pred_dims = [8, 16];
        config.train.epochs = 30;
        config.seed = 11;
        let text = sidecar_text(&config);
        let back = parse_config_text(&text, &fake_path()).unwrap();
        assert_eq!(back.arch, config.arch);
        assert_eq!(back.train.epochs, 30);
        assert_eq!(back.seed, 11);
    }
}
