//! Flat `key = value` config files.
//!
//! One key per line, `#` comments, no nesting. Lists are comma-separated
//! (`lr_decay_epochs = 10,14,17`), the empty list is written `none`. Keys are
//! exactly the training-config field names; unknown keys are rejected with
//! their line number. The same parser consumes `--set key=value` overrides
//! and the effective-config block a run echoes, so a run can be reproduced by
//! feeding its own echo back in.

use dcp_core::loaders::BatchMode;
use dcp_core::losses::CosReduction;
use dcp_core::trainer::{Method, TrainConfig};
use dcp_core::{Error, Result};

/// Every supported config key with a short description. Kept in sync with
/// `TrainConfig` (the tests compare against its serialized field set).
pub const KEYS: &[(&str, &str)] = &[
    ("method", "training method: dcp | fc | partial-fc"),
    ("instance_batch", "instance-loader rows per step (even; half probe, half gallery)"),
    ("identity_batch", "identities drawn per step"),
    ("images_per_identity", "images per drawn identity: auto | integer (auto = k+1 or 2)"),
    ("pool_size", "pool capacity in identities; 0 derives ceil(pool_frac * n_id)"),
    ("pool_frac", "pool capacity as a fraction of total identities"),
    ("k", "features stored per pool identity"),
    ("embed_dim", "embedding dimension"),
    ("hidden", "hidden layer widths, comma-separated (none = linear net)"),
    ("logit_scale", "multiplier on pooled logits"),
    ("cos_weight", "weight of the cosine penalty in the total loss"),
    ("cos_reduction", "cosine penalty reduction over centers: mean | max"),
    ("cos_hinge", "penalize only positive cosine similarity: true | false"),
    ("batch_mode", "identity image split: k-fill | pair"),
    ("insert_instance_features", "also insert gallery-side instance features: true | false"),
    ("partial_ratio", "fraction of classes in the partial-fc optimization queue"),
    ("lr", "initial learning rate"),
    ("lr_decay_epochs", "epochs at which the rate decays, comma-separated (none = constant)"),
    ("lr_decay_factor", "divisor applied at each decay epoch"),
    ("epochs", "training epochs (instance-loader passes)"),
    ("sgd_momentum", "SGD heavy-ball momentum"),
    ("weight_decay", "SGD weight decay"),
    ("sync_momentum", "gallery-net moving-average coefficient in [0,1]"),
    ("seed", "top-level seed; all randomness derives from it"),
];

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a number, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

/// Applies one `key = value` pair to the config. Unknown keys are errors.
pub fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "method" => {
            cfg.method = match v {
                "dcp" => Method::Dcp,
                "fc" => Method::Fc,
                "partial-fc" => Method::PartialFc,
                _ => return Err(Error::Config(format!("method: unknown value `{v}`"))),
            }
        }
        "instance_batch" => cfg.instance_batch = parse_usize(key, v)?,
        "identity_batch" => cfg.identity_batch = parse_usize(key, v)?,
        "images_per_identity" => {
            cfg.images_per_identity =
                if v == "auto" { None } else { Some(parse_usize(key, v)?) }
        }
        "pool_size" => cfg.pool_size = parse_usize(key, v)?,
        "pool_frac" => cfg.pool_frac = parse_f64(key, v)?,
        "k" => cfg.k = parse_usize(key, v)?,
        "embed_dim" => cfg.embed_dim = parse_usize(key, v)?,
        "hidden" => cfg.hidden = parse_usize_list(key, v)?,
        "logit_scale" => cfg.logit_scale = parse_f64(key, v)?,
        "cos_weight" => cfg.cos_weight = parse_f64(key, v)?,
        "cos_reduction" => {
            cfg.cos_reduction = match v {
                "mean" => CosReduction::Mean,
                "max" => CosReduction::Max,
                _ => return Err(Error::Config(format!("cos_reduction: unknown value `{v}`"))),
            }
        }
        "cos_hinge" => cfg.cos_hinge = parse_bool(key, v)?,
        "batch_mode" => {
            cfg.batch_mode = match v {
                "k-fill" => BatchMode::KFill,
                "pair" => BatchMode::Pair,
                _ => return Err(Error::Config(format!("batch_mode: unknown value `{v}`"))),
            }
        }
        "insert_instance_features" => cfg.insert_instance_features = parse_bool(key, v)?,
        "partial_ratio" => cfg.partial_ratio = parse_f64(key, v)?,
        "lr" => cfg.lr = parse_f64(key, v)?,
        "lr_decay_epochs" => cfg.lr_decay_epochs = parse_usize_list(key, v)?,
        "lr_decay_factor" => cfg.lr_decay_factor = parse_f64(key, v)?,
        "epochs" => cfg.epochs = parse_usize(key, v)?,
        "sgd_momentum" => cfg.sgd_momentum = parse_f64(key, v)?,
        "weight_decay" => cfg.weight_decay = parse_f64(key, v)?,
        "sync_momentum" => cfg.sync_momentum = parse_f64(key, v)?,
        "seed" => {
            cfg.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("seed: expected an unsigned integer, got `{v}`")))?
        }
        _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Parses flat config text onto `cfg`. Errors carry line numbers and are
/// aggregated so every bad line is reported at once.
pub fn apply_flat_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    let mut errors = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`, got `{line}`", lineno + 1));
            continue;
        };
        if let Err(e) = apply_kv(cfg, key.trim(), value.trim()) {
            errors.push(format!("line {}: {e}", lineno + 1));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else if errors.len() == 1 {
        let msg = errors.pop().unwrap();
        let line = msg
            .strip_prefix("line ")
            .and_then(|r| r.split(':').next())
            .and_then(|n| n.parse().ok())
            .unwrap_or(0);
        Err(Error::Parse { line, msg })
    } else {
        Err(Error::Config(errors.join("; ")))
    }
}

/// Loads a config file over the defaults.
pub fn load_config(path: &std::path::Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = TrainConfig::default();
    apply_flat_text(&mut cfg, &text)?;
    Ok(cfg)
}

fn list_to_flat(xs: &[usize]) -> String {
    if xs.is_empty() {
        "none".to_string()
    } else {
        xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

/// Renders every resolved value in the flat format; feeding the output back
/// through the parser reproduces the config exactly.
pub fn to_flat(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    push("method", cfg.method.as_str().to_string());
    push("instance_batch", cfg.instance_batch.to_string());
    push("identity_batch", cfg.identity_batch.to_string());
    push(
        "images_per_identity",
        cfg.images_per_identity.map_or_else(|| "auto".to_string(), |v| v.to_string()),
    );
    push("pool_size", cfg.pool_size.to_string());
    push("pool_frac", cfg.pool_frac.to_string());
    push("k", cfg.k.to_string());
    push("embed_dim", cfg.embed_dim.to_string());
    push("hidden", list_to_flat(&cfg.hidden));
    push("logit_scale", cfg.logit_scale.to_string());
    push("cos_weight", cfg.cos_weight.to_string());
    push(
        "cos_reduction",
        match cfg.cos_reduction {
            CosReduction::Mean => "mean".to_string(),
            CosReduction::Max => "max".to_string(),
        },
    );
    push("cos_hinge", cfg.cos_hinge.to_string());
    push(
        "batch_mode",
        match cfg.batch_mode {
            BatchMode::KFill => "k-fill".to_string(),
            BatchMode::Pair => "pair".to_string(),
        },
    );
    push("insert_instance_features", cfg.insert_instance_features.to_string());
    push("partial_ratio", cfg.partial_ratio.to_string());
    push("lr", cfg.lr.to_string());
    push("lr_decay_epochs", list_to_flat(&cfg.lr_decay_epochs));
    push("lr_decay_factor", cfg.lr_decay_factor.to_string());
    push("epochs", cfg.epochs.to_string());
    push("sgd_momentum", cfg.sgd_momentum.to_string());
    push("weight_decay", cfg.weight_decay.to_string());
    push("sync_momentum", cfg.sync_momentum.to_string());
    push("seed", cfg.seed.to_string());
    out
}

/// Help text block enumerating every config key.
pub fn keys_help() -> String {
    let mut out = String::from("Config keys (config file and --set overrides):\n");
    for (key, desc) in KEYS {
        out.push_str(&format!("  {key:<26} {desc}\n"));
    }
    out.push_str("\nPrecedence: defaults < --config file < --set pairs < direct flags.");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_keeps_builtin_defaults() {
        let mut cfg = TrainConfig::default();
        apply_flat_text(&mut cfg, "").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.lr, 0.1);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.lr_decay_epochs, vec![10, 14, 17]);
        assert_eq!(cfg.instance_batch, 256);
        assert_eq!(cfg.identity_batch, 128);
        assert_eq!(cfg.pool_frac, 0.10);
        assert_eq!(cfg.k, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = TrainConfig::default();
        let err = apply_flat_text(&mut cfg, "learning_rate = 0.1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn errors_are_aggregated_with_line_numbers() {
        let mut cfg = TrainConfig::default();
        let err = apply_flat_text(&mut cfg, "lr = abc\n\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = TrainConfig::default();
        apply_flat_text(&mut cfg, "# a comment\n\nepochs = 5 # trailing comment\n").unwrap();
        assert_eq!(cfg.epochs, 5);
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let mut cfg = TrainConfig::default();
        apply_flat_text(
            &mut cfg,
            "method = partial-fc\nimages_per_identity = 3\nhidden = none\n\
             lr_decay_epochs = 1,2\nepochs = 4\ncos_reduction = max\ncos_hinge = true\n\
             batch_mode = pair\nseed = 99\n",
        )
        .unwrap();
        let flat = to_flat(&cfg);
        let mut back = TrainConfig::default();
        apply_flat_text(&mut back, &flat).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn key_table_matches_train_config_fields() {
        let value = serde_json::to_value(TrainConfig::default()).unwrap();
        let fields: std::collections::BTreeSet<String> =
            value.as_object().unwrap().keys().cloned().collect();
        let keys: std::collections::BTreeSet<String> =
            KEYS.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(fields, keys, "config key table out of sync with TrainConfig");
    }

    #[test]
    fn every_key_is_applicable() {
        let mut cfg = TrainConfig::default();
        let flat = to_flat(&cfg);
        for (key, _) in KEYS {
            let line = flat
                .lines()
                .find(|l| l.starts_with(&format!("{key} ")))
                .unwrap_or_else(|| panic!("{key} missing from to_flat output"));
            let value = line.split_once('=').unwrap().1.trim();
            apply_kv(&mut cfg, key, value).unwrap();
        }
    }
}
