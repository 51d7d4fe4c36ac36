//! Config resolution: flags over `--config FILE` (or the directory's
//! `config.json`) over built-in defaults.

use std::path::Path;

use divan::aggregate::ConfidenceMode;
use divan::encoder::{NormOrder, Positional};
use divan::model::{DecayMode, Weighting};
use divan::pipeline::ExperimentConfig;
use divan::{Error, Result};

use crate::{ConfidenceArg, DecayArg, EmbeddingArgs, Input, NormArg, PositionalArg, TrainArgs, WeightingArg};

pub const CONFIG_FILE: &str = "config.json";

/// Explicit config file if given, else `dir/config.json` if present, else defaults.
pub fn resolve(explicit: Option<&Path>, dir: &Path) -> Result<ExperimentConfig> {
    let path = match explicit {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => p.to_path_buf(),
        None => dir.join(CONFIG_FILE),
    };
    if !path.exists() {
        return Ok(ExperimentConfig::default());
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn persist(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn apply_embedding(cfg: &mut ExperimentConfig, a: &EmbeddingArgs) {
    let e = &mut cfg.embedding;
    set(&mut e.dim, a.dim);
    set(&mut e.window, a.window);
    set(&mut e.negatives, a.negatives);
    set(&mut e.epochs, a.epochs);
    set(&mut e.lr, a.lr);
    set(&mut e.seed, a.seed);
    set(&mut cfg.vocab_min_freq, a.min_freq);
}

pub fn apply_train(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    set(&mut t.lr, a.lr);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.max_epochs, a.max_epochs);
    set(&mut t.patience, a.patience);
    set(&mut t.seed, a.seed);
    set(
        &mut t.decay,
        a.decay.map(|d| match d {
            DecayArg::Decoupled => DecayMode::Decoupled,
            DecayArg::Coupled => DecayMode::Coupled,
        }),
    );
    set(
        &mut t.class_weighting,
        a.class_weighting.map(|w| match w {
            WeightingArg::None => Weighting::None,
            WeightingArg::InverseFrequency => Weighting::InverseFrequency,
        }),
    );
    let e = &mut cfg.encoder;
    set(&mut e.d_model, a.d_model);
    set(&mut e.n_heads, a.heads);
    set(&mut e.n_layers, a.layers);
    set(&mut e.d_ff, a.d_ff);
    set(
        &mut e.norm_order,
        a.norm_order.map(|n| match n {
            NormArg::Post => NormOrder::Post,
            NormArg::Pre => NormOrder::Pre,
        }),
    );
    set(
        &mut e.positional,
        a.positional.map(|p| match p {
            PositionalArg::Sinusoidal => Positional::Sinusoidal,
            PositionalArg::Learned => Positional::Learned,
            PositionalArg::None => Positional::None,
        }),
    );
    set(&mut cfg.head.hidden, a.hidden);
    set(&mut cfg.head.dropout, a.dropout);
    for input in &a.without {
        let f = &mut cfg.fusion;
        match input {
            Input::Text => f.text = false,
            Input::Semantic => f.semantic = false,
            Input::Stylometric => f.stylometric = false,
            Input::Form => f.form = false,
            Input::Meter => f.meter = false,
        }
    }
}

pub fn apply_confidence(cfg: &mut ExperimentConfig, c: Option<ConfidenceArg>) {
    set(
        &mut cfg.confidence,
        c.map(|c| match c {
            ConfidenceArg::Mean => ConfidenceMode::Mean,
            ConfidenceArg::Sum => ConfidenceMode::Sum,
        }),
    );
}

/// Comma-separated floats.
pub fn parse_taus(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad threshold `{t}`")))
        })
        .collect()
}
