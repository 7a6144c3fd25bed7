//! Plain-text training configuration: one `key = value` per line, `#`
//! comments, keys named after the [`TrainConfig`] fields (`N` is the pair
//! substructure count). Unlisted keys keep their defaults.

use std::str::FromStr;

use zeroddi_core::brl::Fusion;
use zeroddi_core::train::{LossKind, TrainConfig};

use crate::error::{Error, Result};

pub fn parse_loss(s: &str) -> Option<LossKind> {
    match s {
        "dua" => Some(LossKind::Dua),
        "ce" => Some(LossKind::Ce),
        "hinge" => Some(LossKind::Hinge),
        _ => None,
    }
}

pub fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::Dua => "dua",
        LossKind::Ce => "ce",
        LossKind::Hinge => "hinge",
    }
}

pub fn parse_fusion(s: &str) -> Option<Fusion> {
    match s {
        "ssf" => Some(Fusion::Ssf),
        "mean" => Some(Fusion::MeanTokens),
        _ => None,
    }
}

pub fn fusion_name(f: Fusion) -> &'static str {
    match f {
        Fusion::Ssf => "ssf",
        Fusion::MeanTokens => "mean",
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config { line, msg: format!("invalid value {v:?} for {key}") })
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, v) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got {content:?}") })?;
        match key {
            "learning_rate" => c.learning_rate = value(line, key, v)?,
            "epochs" => c.epochs = value(line, key, v)?,
            "batch_size" => c.batch_size = value(line, key, v)?,
            "tau" => c.tau = value(line, key, v)?,
            "lambda" => c.lambda = value(line, key, v)?,
            "seed" => c.seed = value(line, key, v)?,
            "class_subsample" => {
                c.class_subsample = if v == "none" { None } else { Some(value(line, key, v)?) }
            }
            "gin_layers" => c.gin_layers = value(line, key, v)?,
            "d_v" => c.d_v = value(line, key, v)?,
            "d_n" => c.d_n = value(line, key, v)?,
            "d_r" => c.d_r = value(line, key, v)?,
            "N" => c.n_substructures = value(line, key, v)?,
            "d_t" => c.d_t = value(line, key, v)?,
            "loss" => {
                c.loss = parse_loss(v).ok_or_else(|| Error::Config { line, msg: format!("unknown loss {v:?}") })?
            }
            "ce_scale" => c.ce_scale = value(line, key, v)?,
            "hinge_margin" => c.hinge_margin = value(line, key, v)?,
            "fusion" => {
                c.fusion = parse_fusion(v).ok_or_else(|| Error::Config { line, msg: format!("unknown fusion {v:?}") })?
            }
            "use_attributes" => c.use_attributes = value(line, key, v)?,
            other => return Err(Error::Config { line, msg: format!("unknown key {other:?}") }),
        }
    }
    c.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
    Ok(c)
}

/// Canonical text form; `parse_config(&format_config(c)) == c`.
pub fn format_config(c: &TrainConfig) -> String {
    let subsample = c.class_subsample.map_or_else(|| "none".to_string(), |k| k.to_string());
    format!(
        "learning_rate = {}\nepochs = {}\nbatch_size = {}\ntau = {}\nlambda = {}\nseed = {}\n\
         class_subsample = {subsample}\ngin_layers = {}\nd_v = {}\nd_n = {}\nd_r = {}\nN = {}\nd_t = {}\n\
         loss = {}\nce_scale = {}\nhinge_margin = {}\nfusion = {}\nuse_attributes = {}\n",
        c.learning_rate,
        c.epochs,
        c.batch_size,
        c.tau,
        c.lambda,
        c.seed,
        c.gin_layers,
        c.d_v,
        c.d_n,
        c.d_r,
        c.n_substructures,
        c.d_t,
        loss_name(c.loss),
        c.ce_scale,
        c.hinge_margin,
        fusion_name(c.fusion),
        c.use_attributes,
    )
}
