//! Relevance diagnostics and run artifacts: retained-dimension counts, decoder
//! column norms, relevance reports, PGM reconstruction dumps and the metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{clamp_log_var, gaussian_product_posterior, DiagGaussian};
use crate::error::{ArdError, Result};
use crate::models::{Likelihood, ModelState, Variant};
use crate::network::{mlp_forward, MlpParams};
use crate::numerics::Matrix;

pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionRule {
    /// Posterior relevance mass `μ_τ² + σ_τ²`. ARD variants only.
    ArdMass,
    /// Squared column norm of the decoder's first weight matrix.
    WeightNorm,
}

impl RetentionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            RetentionRule::ArdMass => "ard_mass",
            RetentionRule::WeightNorm => "weight_norm",
        }
    }

    /// `ArdMass` for ARD variants, `WeightNorm` otherwise.
    pub fn default_for(variant: Variant) -> Self {
        if variant.has_ard() {
            RetentionRule::ArdMass
        } else {
            RetentionRule::WeightNorm
        }
    }
}

impl FromStr for RetentionRule {
    type Err = ArdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ard_mass" => Ok(RetentionRule::ArdMass),
            "weight_norm" => Ok(RetentionRule::WeightNorm),
            other => Err(ArdError::config("retention_rule", format!("unknown rule {other:?}"))),
        }
    }
}

/// `Σ_j W[j, d]²` over the decoder's first weight matrix, one entry per latent dimension.
pub fn weight_col_sq_norms(decoder: &MlpParams) -> Vec<f64> {
    let w = decoder.first_weight();
    let mut out = vec![0.0; w.cols()];
    for row in w.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v * v;
        }
    }
    out
}

/// Flags dimensions whose score is at least `threshold_frac` of the largest
/// score. When every score is zero nothing is retained.
pub fn retained_dims(scores: &[f64], threshold_frac: f64) -> Result<(usize, Vec<bool>)> {
    if scores.is_empty() {
        return Err(ArdError::Precondition("no dimensions to rank".into()));
    }
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(ArdError::Precondition(format!(
            "threshold fraction must lie in (0, 1), got {threshold_frac}"
        )));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(ArdError::NonFinite {
            what: "relevance score".into(),
            index: i,
        });
    }
    let max = scores.iter().copied().fold(0.0, f64::max);
    let flags: Vec<bool> = scores.iter().map(|&v| max > 0.0 && v >= threshold_frac * max).collect();
    Ok((flags.iter().filter(|&&f| f).count(), flags))
}

/// Per-dimension scores under `rule`. `ArdMass` on a non-ARD state is an error.
pub fn retention_scores(state: &ModelState, rule: RetentionRule) -> Result<Vec<f64>> {
    match (rule, state.ard.as_ref()) {
        (RetentionRule::WeightNorm, _) => Ok(weight_col_sq_norms(&state.decoder)),
        (RetentionRule::ArdMass, Some(ard)) => Ok(ard.relevance_mass()),
        (RetentionRule::ArdMass, None) => Err(ArdError::VariantMismatch {
            expected: "an ARD variant".into(),
            found: state.variant.to_string(),
        }),
    }
}

/// Retained count of `state` under `rule` (coerced to `WeightNorm` for SGVB).
pub fn retained_count(state: &ModelState, rule: RetentionRule, threshold_frac: f64) -> Result<usize> {
    let rule = if state.ard.is_none() { RetentionRule::WeightNorm } else { rule };
    Ok(retained_dims(&retention_scores(state, rule)?, threshold_frac)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRecord {
    pub index: usize,
    pub mu_tau: Option<f64>,
    pub var_tau: Option<f64>,
    pub lambda: Option<f64>,
    pub weight_col_sq_norm: f64,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub variant: Variant,
    pub rule: RetentionRule,
    pub threshold_used: f64,
    pub retained_count: usize,
    pub dims: Vec<DimRecord>,
}

/// Builds the per-dimension relevance table. SGVB states have no relevance
/// posterior, so their ARD columns are empty and `WeightNorm` is always used.
pub fn relevance_report(state: &ModelState, rule: RetentionRule, threshold_frac: f64) -> Result<RelevanceReport> {
    let rule = if state.ard.is_none() { RetentionRule::WeightNorm } else { rule };
    let norms = weight_col_sq_norms(&state.decoder);
    let (retained_count, flags) = retained_dims(&retention_scores(state, rule)?, threshold_frac)?;
    let lambda = state.ard.as_ref().map(|a| a.lambda());
    let dims = (0..norms.len())
        .map(|d| DimRecord {
            index: d,
            mu_tau: state.ard.as_ref().map(|a| a.mu_tau[d]),
            var_tau: state.ard.as_ref().map(|a| clamp_log_var(a.log_var_tau[d]).exp()),
            lambda: lambda.as_ref().map(|l| l[d]),
            weight_col_sq_norm: norms[d],
            retained: flags[d],
        })
        .collect();
    Ok(RelevanceReport {
        variant: state.variant,
        rule,
        threshold_used: threshold_frac,
        retained_count,
        dims,
    })
}

fn opt_text(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:?}"))
}

impl RelevanceReport {
    /// Flat `key=value` text, one entry per line, in this order: `variant`,
    /// `rule`, `threshold`, `retained_count`, `latent_dim`, then for each
    /// dimension `d` the keys `dim.d.mu_tau`, `dim.d.var_tau`, `dim.d.lambda`,
    /// `dim.d.weight_col_sq_norm`, `dim.d.retained`. Missing values are `null`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "rule={}", self.rule.as_str());
        let _ = writeln!(s, "threshold={:?}", self.threshold_used);
        let _ = writeln!(s, "retained_count={}", self.retained_count);
        let _ = writeln!(s, "latent_dim={}", self.dims.len());
        for r in &self.dims {
            let d = r.index;
            let _ = writeln!(s, "dim.{d}.mu_tau={}", opt_text(r.mu_tau));
            let _ = writeln!(s, "dim.{d}.var_tau={}", opt_text(r.var_tau));
            let _ = writeln!(s, "dim.{d}.lambda={}", opt_text(r.lambda));
            let _ = writeln!(s, "dim.{d}.weight_col_sq_norm={:?}", r.weight_col_sq_norm);
            let _ = writeln!(s, "dim.{d}.retained={}", r.retained);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| ArdError::Format {
            path: PathBuf::from("<report>"),
            location: format!("line {line}"),
            message: msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (i, line) = lines.next().ok_or_else(|| bad(0, format!("missing key {key}")))?;
            let (k, v) = line.split_once('=').ok_or_else(|| bad(i + 1, "expected key=value".into()))?;
            if k != key {
                return Err(bad(i + 1, format!("expected key {key}, found {k}")));
            }
            Ok((i + 1, v.to_string()))
        };
        fn parse<T: FromStr>(v: &(usize, String), bad: &dyn Fn(usize, String) -> ArdError) -> Result<T> {
            v.1.parse().map_err(|_| bad(v.0, format!("cannot parse {:?}", v.1)))
        }
        let parse_opt = |v: &(usize, String)| -> Result<Option<f64>> {
            if v.1 == "null" {
                Ok(None)
            } else {
                parse(v, &bad).map(Some)
            }
        };
        let variant: Variant = parse(&next("variant")?, &bad)?;
        let rule: RetentionRule = next("rule")?.1.parse()?;
        let threshold_used: f64 = parse(&next("threshold")?, &bad)?;
        let retained_count: usize = parse(&next("retained_count")?, &bad)?;
        let n: usize = parse(&next("latent_dim")?, &bad)?;
        let mut dims = Vec::with_capacity(n);
        for d in 0..n {
            dims.push(DimRecord {
                index: d,
                mu_tau: parse_opt(&next(&format!("dim.{d}.mu_tau"))?)?,
                var_tau: parse_opt(&next(&format!("dim.{d}.var_tau"))?)?,
                lambda: parse_opt(&next(&format!("dim.{d}.lambda"))?)?,
                weight_col_sq_norm: parse(&next(&format!("dim.{d}.weight_col_sq_norm"))?, &bad)?,
                retained: parse(&next(&format!("dim.{d}.retained"))?, &bad)?,
            });
        }
        if dims.iter().filter(|r| r.retained).count() != retained_count {
            return Err(bad(0, "retained_count disagrees with per-dimension flags".into()));
        }
        Ok(Self {
            variant,
            rule,
            threshold_used,
            retained_count,
            dims,
        })
    }
}

/// Posterior-mean latent code for each row of `x`, as fed to the decoder.
pub fn latent_means(state: &ModelState, x: &Matrix) -> Result<Matrix> {
    let (q, _) = mlp_forward(&state.encoder, x)?;
    let mut z = q.mean.clone();
    match (state.variant, state.ard.as_ref()) {
        (Variant::SgvbArd, Some(ard)) => {
            for r in 0..z.rows() {
                z.row_mut(r).iter_mut().zip(&ard.mu_tau).for_each(|(v, m)| *v *= m);
            }
        }
        (Variant::GsgvbArd, Some(ard)) => {
            let q_w = DiagGaussian::new(ard.mu_tau.clone(), ard.log_var_tau.clone())?;
            for r in 0..z.rows() {
                let fused = gaussian_product_posterior(&q.row(r), &q_w)?;
                z.row_mut(r).copy_from_slice(fused.mean());
            }
        }
        _ => {}
    }
    Ok(z)
}

/// Decoder mean and per-pixel standard deviation at the posterior-mean code.
pub fn reconstruct(state: &ModelState, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let (p, _) = mlp_forward(&state.decoder, &latent_means(state, x)?)?;
    Ok(match state.likelihood {
        Likelihood::Gaussian => (p.mean, p.log_var.map(|lv| (0.5 * lv).exp())),
        Likelihood::Bernoulli => {
            let prob = p.mean.map(|l| 1.0 / (1.0 + (-l).exp()));
            let std = prob.map(|q| (q * (1.0 - q)).sqrt());
            (prob, std)
        }
    })
}

/// Binary PGM (`P5`, maxval 255) of `h × w` pixels given as bytes.
pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != h * w {
        return Err(ArdError::Dimension {
            context: "PGM pixel count",
            expected: h * w,
            found: pixels.len(),
        });
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| ArdError::io(path, e))
}

/// Reads a binary PGM written by [`write_pgm`], returning `(h, w, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ArdError::io(path, e))?;
    let bad = |at: usize, msg: &str| ArdError::Format {
        path: path.to_path_buf(),
        location: format!("byte {at}"),
        message: msg.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "truncated header"));
        }
        tokens.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if tokens[0].1 != "P5" {
        return Err(bad(0, "not a binary PGM (P5)"));
    }
    let num = |i: usize| tokens[i].1.parse::<usize>().map_err(|_| bad(tokens[i].0, "bad header number"));
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(bad(tokens[3].0, "only maxval 255 is supported"));
    }
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err(bad(bytes.len(), "truncated pixel data"));
    }
    Ok((h, w, bytes[pos..pos + w * h].to_vec()))
}

fn quantize(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes `<prefix>_original.pgm`, `<prefix>_mean.pgm` and `<prefix>_std.pgm`.
///
/// Original and mean are mapped linearly from `range` to `0..=255`; the
/// standard deviation is mapped from `[0, hi − lo]`.
pub fn dump_reconstruction(
    state: &ModelState,
    datapoint: &[f64],
    shape: (usize, usize),
    range: (f64, f64),
    prefix: &Path,
) -> Result<[PathBuf; 3]> {
    let (h, w) = shape;
    if h * w != datapoint.len() || datapoint.len() != state.data_dim() {
        return Err(ArdError::Dimension {
            context: "image shape h*w versus data dimension",
            expected: state.data_dim(),
            found: h * w,
        });
    }
    let x = Matrix::new(1, datapoint.len(), datapoint.to_vec())?;
    let (mean, std) = reconstruct(state, &x)?;
    let (lo, hi) = range;
    let name = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(format!("_{suffix}.pgm"));
        PathBuf::from(s)
    };
    let paths = [name("original"), name("mean"), name("std")];
    write_pgm(&paths[0], h, w, &quantize(datapoint, lo, hi))?;
    write_pgm(&paths[1], h, w, &quantize(mean.as_slice(), lo, hi))?;
    write_pgm(&paths[2], h, w, &quantize(std.as_slice(), 0.0, hi - lo))?;
    Ok(paths)
}

/// One row of the training log. Column order of the CSV follows field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iteration: u64,
    pub epoch: u64,
    pub bound_total: f64,
    pub bound_recon: f64,
    pub bound_kl_z: f64,
    pub bound_kl_w: f64,
    /// `bound_total / D`.
    pub bound_per_pixel: f64,
    /// Mean of the trailing test-score window, when a test set is evaluated.
    pub test_bound: Option<f64>,
    pub retained_count: usize,
    pub grad_norm: f64,
    pub rejected_steps: u64,
    pub clipped: bool,
    pub wall_clock_s: f64,
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "iteration",
    "epoch",
    "bound_total",
    "bound_recon",
    "bound_kl_z",
    "bound_kl_w",
    "bound_per_pixel",
    "test_bound",
    "retained_count",
    "grad_norm",
    "rejected_steps",
    "clipped",
    "wall_clock_s",
];

impl RunMetrics {
    /// Equality on every field except wall-clock time.
    pub fn same_trajectory(&self, other: &RunMetrics) -> bool {
        let strip = |m: &RunMetrics| RunMetrics {
            wall_clock_s: 0.0,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

/// Appending CSV sink for [`RunMetrics`]; the header is written on creation.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| ArdError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    /// Reopens an existing log for appending, e.g. after resuming from a checkpoint.
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| ArdError::io(path, e))?;
        Ok(Self {
            inner: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &RunMetrics) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| ArdError::io(&self.path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> ArdError {
    let location = e
        .position()
        .map_or_else(|| "unknown".to_string(), |p| format!("line {}", p.line()));
    ArdError::Format {
        path: path.to_path_buf(),
        location,
        message: e.to_string(),
    }
}

pub fn write_metrics(rows: &[RunMetrics], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for row in rows {
        w.write(row)?;
    }
    w.flush()
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunMetrics>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != METRICS_COLUMNS {
        return Err(ArdError::Format {
            path: path.to_path_buf(),
            location: "line 1".into(),
            message: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, Variant};
    use crate::network::{Dense, LogVarHead};
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn state(variant: Variant, latent: usize) -> ModelState {
        ModelState::init(
            &ModelSpec {
                variant,
                input_dim: 6,
                latent_dim: latent,
                hidden: vec![5],
                likelihood: Likelihood::Gaussian,
                shared_decoder_log_var: false,
            },
            &mut RngStream::new(7),
        )
        .unwrap()
    }

    fn decoder_with_first(w: Matrix) -> MlpParams {
        let out = w.rows();
        MlpParams {
            hidden: vec![Dense {
                weight: w,
                bias: vec![0.0; out],
            }],
            mean_head: Dense::zeros(out, 2),
            log_var_head: LogVarHead::Shared(vec![0.0; 2]),
        }
    }

    #[test]
    fn column_norm_examples() {
        assert_eq!(weight_col_sq_norms(&decoder_with_first(Matrix::zeros(3, 2))), vec![0.0, 0.0]);
        assert_eq!(weight_col_sq_norms(&decoder_with_first(Matrix::identity(3))), vec![1.0; 3]);
        let w = Matrix::from_rows(&[[3.0, 1.0], [4.0, 0.0]]).unwrap();
        assert_eq!(weight_col_sq_norms(&decoder_with_first(w))[0], 25.0);
    }

    #[test]
    fn column_norms_ignore_later_layers() {
        let mut s = state(Variant::Sgvb, 4);
        let before = weight_col_sq_norms(&s.decoder);
        s.decoder.mean_head.weight = s.decoder.mean_head.weight.map(|v| v * 7.0 + 1.0);
        s.decoder.mean_head.bias.iter_mut().for_each(|b| *b = 3.0);
        assert_eq!(weight_col_sq_norms(&s.decoder), before);
    }

    #[test]
    fn retained_examples() {
        assert_eq!(retained_dims(&[2.0; 5], 0.01).unwrap(), (5, vec![true; 5]));
        assert_eq!(retained_dims(&[0.0, 1.0, 0.0], 0.01).unwrap().0, 1);
        assert_eq!(retained_dims(&[0.0, 0.0], 0.01).unwrap().0, 0);
        assert!(retained_dims(&[], 0.01).is_err());
        assert!(retained_dims(&[1.0], 0.0).is_err());
        assert!(retained_dims(&[1.0], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn retained_flags_are_permutation_equivariant(
            scores in proptest::collection::vec(0.0..10.0f64, 1..20),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            RngStream::new(seed).shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let (_, flags) = retained_dims(&scores, 0.01).unwrap();
            let (_, pflags) = retained_dims(&permuted, 0.01).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pflags[k], flags[i]);
            }
        }

        #[test]
        fn retained_flags_are_scale_invariant(
            scores in proptest::collection::vec(0.0..10.0f64, 1..20),
            log_c in -20.0..20.0f64,
        ) {
            // powers of two keep the scaling exact
            let c = 2f64.powi(log_c as i32);
            let scaled: Vec<f64> = scores.iter().map(|v| v * c).collect();
            prop_assert_eq!(retained_dims(&scores, 0.01).unwrap(), retained_dims(&scaled, 0.01).unwrap());
        }
    }

    #[test]
    fn fresh_ard_state_retains_everything() {
        let s = state(Variant::SgvbArd, 4);
        let report = relevance_report(&s, RetentionRule::ArdMass, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(report.retained_count, 4);
        let d = &report.dims[0];
        assert_eq!((d.mu_tau, d.var_tau, d.lambda), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn sgvb_report_uses_weight_norms() {
        let mut s = state(Variant::Sgvb, 3);
        for v in s.decoder.hidden[0].weight.as_mut_slice().iter_mut().skip(1).step_by(3) {
            *v = 0.0;
        }
        let report = relevance_report(&s, RetentionRule::ArdMass, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(report.rule, RetentionRule::WeightNorm);
        assert!(report.dims.iter().all(|d| d.mu_tau.is_none() && d.lambda.is_none()));
        assert_eq!(report.retained_count, 2);
        assert!(!report.dims[1].retained);
        let (count, _) = retained_dims(&weight_col_sq_norms(&s.decoder), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(report.retained_count, count);
        assert_eq!(retained_count(&s, RetentionRule::ArdMass, DEFAULT_THRESHOLD).unwrap(), count);
    }

    #[test]
    fn report_text_round_trips() {
        for variant in Variant::ALL {
            let mut s = state(variant, 5);
            if let Some(a) = s.ard.as_mut() {
                a.mu_tau = vec![0.1, -2.5, 1e-9, 3.0, 1.0 / 3.0];
                a.log_lambda[2] = -7.25;
            }
            let report = relevance_report(&s, RetentionRule::default_for(variant), 0.05).unwrap();
            let text = report.to_text();
            assert!(text.starts_with("variant="));
            assert_eq!(RelevanceReport::from_text(&text).unwrap(), report);
        }
        assert!(RelevanceReport::from_text("variant=sgvb\nrule=bogus\n").is_err());
    }

    #[test]
    fn pgm_files_are_valid_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = state(Variant::SgvbArd, 3);
        let x: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let paths = dump_reconstruction(&s, &x, (2, 3), (0.0, 1.0), &dir.path().join("rec")).unwrap();
        for p in &paths {
            let bytes = fs::read(p).unwrap();
            assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
            let (h, w, px) = read_pgm(p).unwrap();
            assert_eq!((h, w, px.len()), (2, 3, 6));
        }
        let (_, _, px) = read_pgm(&paths[0]).unwrap();
        for (v, p) in x.iter().zip(px) {
            assert!((f64::from(p) / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(dump_reconstruction(&s, &x, (2, 2), (0.0, 1.0), &dir.path().join("bad")).is_err());
    }

    #[test]
    fn constant_reconstruction_is_constant_gray() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state(Variant::Sgvb, 3);
        s.decoder.mean_head.weight = Matrix::zeros(6, 5);
        s.decoder.mean_head.bias = vec![0.5; 6];
        let paths = dump_reconstruction(&s, &[0.5; 6], (3, 2), (0.0, 1.0), &dir.path().join("c")).unwrap();
        for p in &paths[..2] {
            let (_, _, px) = read_pgm(p).unwrap();
            assert!(px.iter().all(|&v| v == 128), "{px:?}");
        }
    }

    fn row(i: u64, test: Option<f64>) -> RunMetrics {
        RunMetrics {
            iteration: i,
            epoch: 1,
            bound_total: -1.0 / 3.0 * i as f64,
            bound_recon: 0.1 + i as f64,
            bound_kl_z: std::f64::consts::PI,
            bound_kl_w: 1e-300,
            bound_per_pixel: -0.123456789012345678,
            test_bound: test,
            retained_count: 4,
            grad_norm: 12.5,
            rejected_steps: 0,
            clipped: i % 2 == 0,
            wall_clock_s: 0.001,
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert!(read_metrics(&p).unwrap().is_empty());

        let rows = vec![row(1, None), row(2, Some(-5.5)), row(3, None)];
        write_metrics(&rows, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(read_metrics(&p).unwrap(), rows);

        let mut w = MetricsWriter::append(&p).unwrap();
        w.write(&row(4, None)).unwrap();
        w.flush().unwrap();
        assert_eq!(read_metrics(&p).unwrap().len(), 4);
    }
}
