//! Robustness curves and embedding export.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::attacks::{AttackConfig, AttackFamily, AttackResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Classifier, Pipeline};

/// Rows per attack call during evaluation.
const EVAL_CHUNK: usize = 500;

pub const DEFAULT_EVAL_N: usize = 1000;

/// `0, 0.025, ..., 0.4`.
pub fn mnist_grid() -> Vec<f64> {
    (0..=16).map(|i| i as f64 * 0.025).collect()
}

/// Parses `start:stop:step` (inclusive stop) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::usage(format!("bad number `{s}` in grid `{text}`")))
    };
    let grid = match text.split(':').collect::<Vec<_>>()[..] {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step <= 0.0 || stop < start {
                return Err(Error::usage(format!("empty grid `{text}`")));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=count).map(|i| start + i as f64 * step).collect()
        }
        [_] => text.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(Error::usage(format!("grid `{text}` is neither a:b:c nor a list"))),
    };
    validate_grid(&grid)?;
    Ok(grid)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::usage("empty epsilon grid"));
    }
    if grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::usage("epsilon values must be finite and >= 0"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("epsilon grid must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub grid: Vec<f64>,
    /// Percent correct after attack, one per grid entry.
    pub accuracies: Vec<f64>,
    pub attack: AttackConfig,
    pub model: String,
    pub eval_n: usize,
}

/// Attacks the first `eval_n` examples at every grid point. The `ε = 0`
/// entry is computed by a direct prediction pass.
pub fn evaluate_curve<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    attack: &AttackConfig,
    grid: &[f64],
    eval_n: usize,
    model_id: &str,
) -> Result<RobustnessCurve> {
    validate_grid(grid)?;
    if attack.family == AttackFamily::CwL2 {
        return Err(Error::usage("robustness curves need an epsilon-bounded attack (fgsm or pgd)"));
    }
    if eval_n == 0 || eval_n > dataset.len() {
        return Err(Error::usage(format!(
            "eval_n = {eval_n} must be in 1..={}",
            dataset.len()
        )));
    }
    let subset = dataset.take_first(eval_n)?;
    let mut accuracies = Vec::with_capacity(grid.len());
    for &eps in grid {
        if eps == 0.0 {
            accuracies.push(subset.accuracy(model)?);
            continue;
        }
        let cfg = attack.with_epsilon(eps);
        let mut correct = 0usize;
        for start in (0..eval_n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(eval_n);
            let x = subset.images().slice_rows(start, end)?;
            let r = cfg.run_from(model, &x, &subset.labels()[start..end], start as u64)?;
            correct += r.success.iter().filter(|&&s| !s).count();
        }
        accuracies.push(100.0 * correct as f64 / eval_n as f64);
    }
    Ok(RobustnessCurve {
        grid: grid.to_vec(),
        accuracies,
        attack: attack.clone(),
        model: model_id.to_string(),
        eval_n,
    })
}

impl RobustnessCurve {
    pub const HEADER: &'static str = "epsilon,accuracy,attack,steps,step_ratio,model,eval_n";

    /// Accuracy at the grid point closest to `eps`.
    pub fn at(&self, eps: f64) -> Option<f64> {
        self.grid
            .iter()
            .zip(&self.accuracies)
            .min_by(|a, b| (a.0 - eps).abs().total_cmp(&(b.0 - eps).abs()))
            .map(|(_, a)| *a)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        let ratio = if self.attack.epsilon > 0.0 {
            self.attack.step_size / self.attack.epsilon
        } else {
            0.0
        };
        for (eps, acc) in self.grid.iter().zip(&self.accuracies) {
            writeln!(
                w,
                "{eps},{acc},{},{},{ratio},{},{}",
                self.attack.family.name(),
                self.attack.steps,
                self.model,
                self.eval_n
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Reads a curve written by [`RobustnessCurve::write_csv`].
    pub fn read_csv(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        if header.trim() != Self::HEADER {
            return Err(Error::format(path, 0, format!("unexpected header `{header}`")));
        }
        let mut curve = None::<Self>;
        let mut offset = header.len() as u64 + 1;
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = |m: &str| Error::format(path, offset, format!("{m} in `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let eps: f64 = f[0].parse().map_err(|_| bad("bad epsilon"))?;
            let acc: f64 = f[1].parse().map_err(|_| bad("bad accuracy"))?;
            let c = curve.get_or_insert_with(|| {
                let mut attack = AttackConfig::pgd(0.0);
                attack.family = f[2].parse().unwrap_or(AttackFamily::PgdLinf);
                attack.steps = f[3].parse().unwrap_or(0);
                let ratio: f64 = f[4].parse().unwrap_or(0.0);
                attack.epsilon = 1.0;
                attack.step_size = ratio;
                RobustnessCurve {
                    grid: Vec::new(),
                    accuracies: Vec::new(),
                    attack,
                    model: f[5].to_string(),
                    eval_n: f[6].parse().unwrap_or(0),
                }
            });
            c.grid.push(eps);
            c.accuracies.push(acc);
            offset += line.len() as u64 + 1;
        }
        let curve = curve.ok_or_else(|| Error::format(path, offset, "curve has no rows"))?;
        validate_grid(&curve.grid).map_err(|e| Error::format(path, 0, e.to_string()))?;
        Ok(curve)
    }
}

/// Writes one row per example: label, whether the (possibly attacked)
/// prediction is correct, then the latent coordinates of the clean input.
/// Without an attack the flag reflects the clean prediction.
pub fn export_embeddings(
    pipeline: &Pipeline,
    dataset: &Dataset,
    attack: Option<&AttackConfig>,
    mut out: impl Write,
) -> Result<()> {
    let k = pipeline.latent_dim();
    let mut header = String::from("label,correct");
    for j in 0..k {
        header.push_str(&format!(",z{j}"));
    }
    let io = |e| Error::io("<embedding output>", e);
    writeln!(out, "{header}").map_err(io)?;
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.len());
        let x = dataset.images().slice_rows(start, end)?;
        let y = &dataset.labels()[start..end];
        let correct: Vec<bool> = match attack {
            Some(cfg) => cfg
                .run_from(pipeline, &x, y, start as u64)?
                .success
                .iter()
                .map(|s| !s)
                .collect(),
            None => pipeline.predict(&x)?.iter().zip(y).map(|(p, t)| p == t).collect(),
        };
        let z = pipeline.encode(&x)?;
        for (i, label) in y.iter().enumerate() {
            let mut row = format!("{label},{}", u8::from(correct[i]));
            for v in z.row(i) {
                row.push_str(&format!(",{v}"));
            }
            writeln!(out, "{row}").map_err(io)?;
        }
    }
    Ok(())
}

pub const ATTACK_RESULT_HEADER: &str = "index,label,success,linf,l2";

/// Per-example summary of an attack run.
pub fn write_attack_result(result: &AttackResult, labels: &[usize], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{ATTACK_RESULT_HEADER}")?;
    for (i, label) in labels.iter().enumerate() {
        writeln!(
            out,
            "{i},{label},{},{},{}",
            u8::from(result.success[i]),
            result.linf[i],
            result.l2[i]
        )?;
    }
    Ok(())
}
