//! Corpus BLEU-4, the image-quality ablation, the image-count sweep and
//! the noise-rate report.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureBundle, FeatureError};
use crate::retrieval::atomic_write;
use crate::trainer::{train_multi_seed, Experiment, MacroReport, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no candidate sentences to score")]
    EmptyCandidates,
    #[error("{candidates} candidates but {references} references")]
    CountMismatch { candidates: usize, references: usize },
    #[error("no labels to report on")]
    NoLabels,
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// 0–100.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with a single reference per sentence, clipped n-gram
/// precision for n = 1..4, no smoothing.
pub fn bleu4<C, R, S, T>(candidates: &[C], references: &[R]) -> Result<BleuReport, EvalError>
where
    C: AsRef<[S]>,
    R: AsRef<[T]>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    if candidates.is_empty() {
        return Err(EvalError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len <= r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageLabel {
    Noise,
    Informative,
}

impl std::str::FromStr for ImageLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "informative" => Ok(Self::Informative),
            other => Err(format!("unknown label {other:?} (expected noise or informative)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub noise: usize,
    pub informative: usize,
    pub total: usize,
    /// `noise / total`
    pub proportion: f64,
    /// `noise · 100 / total`, computed directly so round figures stay exact.
    pub percent: f64,
}

impl NoiseReport {
    pub fn from_counts(noise: usize, total: usize) -> Result<Self, EvalError> {
        if total == 0 || noise > total {
            return Err(EvalError::NoLabels);
        }
        Ok(Self {
            noise,
            informative: total - noise,
            total,
            proportion: noise as f64 / total as f64,
            percent: (noise * 100) as f64 / total as f64,
        })
    }
}

pub fn noise_report<I: IntoIterator<Item = ImageLabel>>(labels: I) -> Result<NoiseReport, EvalError> {
    let (mut noise, mut total) = (0, 0);
    for label in labels {
        total += 1;
        if label == ImageLabel::Noise {
            noise += 1;
        }
    }
    NoiseReport::from_counts(noise, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    #[default]
    Retrieved,
    Shuffled,
    Blank,
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieved" => Ok(Self::Retrieved),
            "shuffled" => Ok(Self::Shuffled),
            "blank" => Ok(Self::Blank),
            other => Err(format!("unknown ablation mode {other:?}")),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Retrieved => "retrieved",
            Self::Shuffled => "shuffled",
            Self::Blank => "blank",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub shuffle_seed: u64,
}

/// Seeded uniform permutation of `0..n` (fixed points allowed).
pub fn shuffle_assignment(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Applies the mode to one split: blank zeroes every slot; shuffled gives
/// sentence `i` the whole bundle of sentence `perm[i]`.
pub fn apply_ablation(bundles: &[FeatureBundle], spec: &AblationSpec) -> Vec<FeatureBundle> {
    match spec.mode {
        AblationMode::Retrieved => bundles.to_vec(),
        AblationMode::Blank => bundles.iter().map(FeatureBundle::blanked).collect(),
        AblationMode::Shuffled => shuffle_assignment(bundles.len(), spec.shuffle_seed)
            .into_iter()
            .zip(bundles)
            .map(|(from, own)| bundles[from].reassigned(own.sid))
            .collect(),
    }
}

/// The experiment with `spec` applied to train, dev and test bundles. Each
/// split gets its own derived shuffle seed.
pub fn ablated_experiment(exp: &Experiment, spec: &AblationSpec) -> Experiment {
    let mut out = exp.clone();
    for (k, split) in [&mut out.train, &mut out.dev, &mut out.test].into_iter().enumerate() {
        let split_spec = AblationSpec {
            mode: spec.mode,
            shuffle_seed: spec.shuffle_seed.wrapping_add(k as u64),
        };
        split.bundles = apply_ablation(&split.bundles, &split_spec);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub macro_bleu: Option<f64>,
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub failed: bool,
}

type RowSummary = (Option<f64>, Vec<(u64, Option<f64>)>, bool);

fn row_summary(report: &MacroReport) -> RowSummary {
    (
        report.macro_bleu,
        report.runs.iter().map(|r| (r.seed, r.test_bleu())).collect(),
        report.failed,
    )
}

/// Retrains and scores the experiment once per mode.
pub fn run_ablation(
    exp: &Experiment,
    modes: &[AblationMode],
    shuffle_seed: u64,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for &mode in modes {
        let spec = AblationSpec { mode, shuffle_seed };
        let dir = out_dir.map(|d| d.join(mode.to_string()));
        let report = train_multi_seed(&ablated_experiment(exp, &spec), config, dir.as_deref())?;
        let (macro_bleu, per_seed, failed) = row_summary(&report);
        rows.push(AblationRow {
            mode,
            macro_bleu,
            per_seed,
            failed,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub macro_bleu: Option<f64>,
    pub per_seed: Vec<(u64, Option<f64>)>,
    pub failed: bool,
}

/// The experiment with every bundle cut to its first `m` images.
pub fn truncated_experiment(exp: &Experiment, m: usize) -> Result<Experiment, EvalError> {
    let mut out = exp.clone();
    for split in [&mut out.train, &mut out.dev, &mut out.test] {
        split.bundles = split
            .bundles
            .iter()
            .map(|b| b.truncated(m))
            .collect::<Result<_, _>>()?;
    }
    Ok(out)
}

pub fn sweep_image_count(
    exp: &Experiment,
    m_values: &[usize],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>, EvalError> {
    // Fail before any training when some sentence is short of images.
    let max_m = m_values.iter().copied().max().unwrap_or(0);
    truncated_experiment(exp, max_m)?;
    let mut rows = Vec::new();
    for &m in m_values {
        let dir = out_dir.map(|d| d.join(format!("m{m}")));
        let cfg = TrainConfig {
            images_per_sentence: m,
            ..config.clone()
        };
        let report = train_multi_seed(&truncated_experiment(exp, m)?, &cfg, dir.as_deref())?;
        let (macro_bleu, per_seed, failed) = row_summary(&report);
        rows.push(SweepRow {
            m,
            macro_bleu,
            per_seed,
            failed,
        });
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| EvalError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|e| EvalError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureMatrix, SlotFlag};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn self_match_scores_100() {
        let refs = vec![toks("a man rides a horse on the beach"), toks("two dogs play in the snow")];
        let r = bleu4(&refs, &refs).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let r = bleu4(&[toks("the the the the")], &[toks("the cat")]).unwrap();
        assert_eq!(r.matches[0], 1);
        assert_eq!(r.totals[0], 4);
        assert_eq!(r.precisions[0], 0.25);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let r = bleu4(&[toks("a b c d e")], &[toks("a b c x e")]).unwrap();
        assert!(r.precisions[0] > 0.0);
        assert_eq!(r.matches[3], 0);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_for_short_output() {
        let r = bleu4(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((r.brevity_penalty - (1.0f64 - 2.0).exp()).abs() < 1e-15);
        assert!((r.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_errors() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(matches!(bleu4(&empty, &empty), Err(EvalError::EmptyCandidates)));
        assert!(matches!(
            bleu4(&[toks("a")], &[toks("a"), toks("b")]),
            Err(EvalError::CountMismatch { .. })
        ));
    }

    #[test]
    fn noise_percentages() {
        for (n, pct) in [(61, 6.1), (228, 22.8), (685, 68.5), (0, 0.0)] {
            let r = NoiseReport::from_counts(n, 1000).unwrap();
            assert_eq!(r.percent, pct);
            assert_eq!(r.proportion, n as f64 / 1000.0);
            assert_eq!(r.noise + r.informative, r.total);
        }
        let labels = std::iter::repeat_n(ImageLabel::Noise, 61)
            .chain(std::iter::repeat_n(ImageLabel::Informative, 939));
        assert_eq!(noise_report(labels).unwrap().proportion, 0.061);
        assert!(matches!(noise_report(std::iter::empty()), Err(EvalError::NoLabels)));
    }

    fn bundle(sid: usize, fill: f64) -> FeatureBundle {
        let m = FeatureMatrix::new(1, 2, vec![fill, fill]).unwrap();
        FeatureBundle::new(sid, vec![m.clone(), m], vec![SlotFlag::Mock; 2]).unwrap()
    }

    #[test]
    fn ablation_modes() {
        let bundles: Vec<_> = (0..6).map(|i| bundle(i, i as f64 + 1.0)).collect();
        let blank = apply_ablation(&bundles, &AblationSpec { mode: AblationMode::Blank, shuffle_seed: 0 });
        assert!(blank.iter().all(|b| b.matrices().iter().all(FeatureMatrix::is_zero)));
        assert_eq!(blank[3].sid, 3);

        let spec = AblationSpec { mode: AblationMode::Shuffled, shuffle_seed: 9 };
        let a = apply_ablation(&bundles, &spec);
        assert_eq!(a, apply_ablation(&bundles, &spec));
        let perm = shuffle_assignment(6, 9);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        for (i, b) in a.iter().enumerate() {
            assert_eq!(b.sid, i);
            assert_eq!(b.matrices(), bundles[perm[i]].matrices());
            assert!(b.flags().iter().all(|f| *f == SlotFlag::Shuffled));
        }
        let same = apply_ablation(&bundles, &AblationSpec { mode: AblationMode::Retrieved, shuffle_seed: 0 });
        assert_eq!(same, bundles);
    }
}
