//! OOD evaluation: per-row scores, AUROC, entropy scores, and Morse
//! temperature scaling of an external classifier.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, FeatureFn, FeatureMap, Gradients};
use crate::data::{format_real, Dataset};
use crate::error::{Error, Result};
use crate::kernels::KERNEL_FLOOR;
use crate::model::{DensityModel, MorseModel};
use crate::rng::Rng;
use crate::training::{run_schedule, AdamParams, LossRecord, OptimizerState, Schedule, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Origin {
    Ind,
    Ood,
}

/// OOD scores (higher means more out-of-distribution) from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    origin: Origin,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, origin: Origin) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i} is {}", scores[i])));
        }
        Ok(Self { scores, origin })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Per-row density summary.
///
/// For supervised models `mu` is the marginal `Σ_y μ(x, y)`, which may exceed
/// 1; `s` is then clipped at 0 while `V` and `T` follow `mu` directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub mu: f64,
    pub s: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

impl ScoreRecord {
    pub fn from_density(mu: f64) -> Self {
        let floored = mu.max(KERNEL_FLOOR);
        Self {
            mu,
            s: 1.0 - mu.min(1.0),
            v: -floored.ln(),
            t: 1.0 / floored,
        }
    }

    pub fn column(&self, name: &str) -> Result<f64> {
        match name {
            "mu" => Ok(self.mu),
            "s" => Ok(self.s),
            "V" => Ok(self.v),
            "T" => Ok(self.t),
            other => Err(Error::Invalid(format!("unknown score column `{other}` (expected mu, s, V or T)"))),
        }
    }
}

pub fn score_dataset<M: DensityModel + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<ScoreRecord>> {
    if data.dim() != model.input_dim() {
        return Err(Error::dim("scored data", model.input_dim(), data.dim()));
    }
    Ok(model
        .density_rows(data.view())?
        .into_iter()
        .map(ScoreRecord::from_density)
        .collect())
}

pub fn write_scores_csv(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["mu", "s", "V", "T"])?;
    for r in records {
        w.write_record([r.mu, r.s, r.v, r.t].map(format_real))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one column of a scores CSV.
pub fn read_score_column(path: impl AsRef<Path>, column: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(std::io::BufReader::new(file));
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Format(format!("{}: no column `{column}`", path.display())))?;
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let cell = rec.get(idx).unwrap_or("");
            cell.parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: row {}: `{cell}` is not a number", path.display(), i + 1)))
        })
        .collect()
}

/// `P(ood > ind) + ½ P(ood = ind)` via the midrank statistic.
pub fn auroc(ind: &ScoreSet, ood: &ScoreSet) -> Result<f64> {
    if ind.is_empty() || ood.is_empty() {
        return Err(Error::Invalid("AUROC needs nonempty IND and OOD score sets".into()));
    }
    let mut all: Vec<(f64, bool)> = ind
        .scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood.scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks are 1-based; ties share the mean of their positions
    let mut ood_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        ood_rank_sum += midrank * all[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (n_ind, n_ood) = (ind.len() as f64, ood.len() as f64);
    Ok((ood_rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_ind * n_ood))
}

/// Quadratic pair counting; the reference definition of [`auroc`].
pub fn auroc_pairwise(ind: &[f64], ood: &[f64]) -> Result<f64> {
    if ind.is_empty() || ood.is_empty() {
        return Err(Error::Invalid("AUROC needs nonempty IND and OOD score sets".into()));
    }
    let mut wins = 0.0;
    for &o in ood {
        for &i in ind {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (ind.len() * ood.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub auroc: f64,
    pub n_ind: usize,
    pub n_ood: usize,
}

pub fn auroc_report(ind: &ScoreSet, ood: &ScoreSet) -> Result<AurocReport> {
    Ok(AurocReport {
        auroc: auroc(ind, ood)?,
        n_ind: ind.len(),
        n_ood: ood.len(),
    })
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_score(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(format!("not a probability vector: {p:?}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum::<f64>().max(0.0))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Divides the logits by the Morse temperature, i.e. multiplies them by `μ(x)`.
pub fn scale_logits<F: FeatureFn>(logits: &[f64], model: &MorseModel<F>, x: &[f64]) -> Result<Vec<f64>> {
    if model.is_supervised() {
        return Err(Error::Unsupported("logit scaling needs an unsupervised model".into()));
    }
    let mu = model.density(x)?;
    Ok(logits.iter().map(|l| l * mu).collect())
}

/// Dense classifier with identity skip connections around each hidden block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub width: usize,
    pub blocks: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 6,
            activation: Activation::Relu,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            schedule: Schedule::Epochs(100),
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

/// `h(x)`: input projection, hidden blocks `u ↦ u + g(u)` (or `g(u)`
/// without skips), and a linear map to `C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    stem: FeatureMap,
    blocks: Vec<FeatureMap>,
    head: FeatureMap,
    residual: bool,
}

struct HeadTapes {
    stem: crate::autodiff::Tape,
    blocks: Vec<crate::autodiff::Tape>,
    head: crate::autodiff::Tape,
}

impl ClassifierHead {
    pub fn new(input_dim: usize, num_classes: usize, arch: &ClassifierArch, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Invalid(format!("a classifier needs at least 2 classes, got {num_classes}")));
        }
        if arch.width == 0 {
            return Err(Error::Invalid("classifier width must be positive".into()));
        }
        let stem = FeatureMap::init_params(&[input_dim, arch.width], arch.activation, Rng::derive(seed, 0).next_u64(), true)?;
        let blocks = (0..arch.blocks)
            .map(|b| {
                FeatureMap::init_params(
                    &[arch.width, arch.width],
                    arch.activation,
                    Rng::derive(seed, 1 + b as u64).next_u64(),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = FeatureMap::init_params(
            &[arch.width, num_classes],
            Activation::Linear,
            Rng::derive(seed, 1 + arch.blocks as u64).next_u64(),
            true,
        )?;
        Ok(Self {
            stem,
            blocks,
            head,
            residual: arch.residual,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.stem.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    fn maps(&self) -> impl Iterator<Item = &FeatureMap> {
        std::iter::once(&self.stem).chain(&self.blocks).chain(std::iter::once(&self.head))
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, HeadTapes)> {
        let (mut h, stem) = self.stem.forward(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (g, tape) = block.forward(h.view())?;
            h = if self.residual { h + g } else { g };
            blocks.push(tape);
        }
        let (logits, head) = self.head.forward(h.view())?;
        Ok((logits, HeadTapes { stem, blocks, head }))
    }

    fn backward(&self, tapes: &HeadTapes, upstream: ArrayView2<'_, f64>) -> Result<Vec<Gradients>> {
        let (head_grads, mut g) = self.head.backward(&tapes.head, upstream)?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, tape) in self.blocks.iter().zip(&tapes.blocks).rev() {
            let (grads, through) = block.backward(tape, g.view())?;
            g = if self.residual { g + through } else { through };
            block_grads.push(grads);
        }
        block_grads.reverse();
        let (stem_grads, _) = self.stem.backward(&tapes.stem, g.view())?;
        let mut all = vec![stem_grads];
        all.extend(block_grads);
        all.push(head_grads);
        Ok(all)
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// `f(x) = softmax(h(x))` per row.
    pub fn probabilities(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut logits = self.logits(x)?;
        for mut row in logits.rows_mut() {
            let p = softmax(row.as_slice().expect("contiguous"));
            row.assign(&ndarray::Array1::from(p));
        }
        Ok(logits)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                // first maximum wins
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = data.labels.as_deref().ok_or_else(|| Error::Invalid("accuracy needs labels".into()))?;
        let predicted = self.predict(data.view())?;
        let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Mean softmax cross-entropy and its parameter gradients.
    fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Vec<Gradients>)> {
        let c = self.num_classes();
        let (logits, tapes) = self.forward(x)?;
        let n = labels.len() as f64;
        let mut upstream = Array2::zeros(logits.raw_dim());
        let mut total = 0.0;
        for ((row, mut up), &y) in logits.rows().into_iter().zip(upstream.rows_mut()).zip(labels) {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, num_classes: c });
            }
            let p = softmax(row.as_slice().expect("contiguous"));
            total -= p[y].max(f64::MIN_POSITIVE).ln();
            for (k, u) in up.iter_mut().enumerate() {
                *u = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
            }
        }
        Ok((total / n, self.backward(&tapes, upstream.view())?))
    }
}

/// Fits a [`ClassifierHead`] with softmax cross-entropy and Adam.
pub fn train_classifier(data: &Dataset, arch: &ClassifierArch, config: &ClassifierConfig) -> Result<TrainOutcome<ClassifierHead>> {
    let labels = data
        .labels
        .as_deref()
        .ok_or_else(|| Error::Invalid("classifier training needs labels".into()))?;
    let c = data.num_classes().unwrap_or(0);
    if c < 2 {
        return Err(Error::Invalid("classifier training needs at least two classes".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) || config.batch_size == 0 {
        return Err(Error::Invalid("learning rate and batch size must be positive".into()));
    }
    if matches!(config.schedule, Schedule::Epochs(0) | Schedule::Steps(0)) {
        return Err(Error::Invalid("training needs at least one epoch or step".into()));
    }
    let mut model = ClassifierHead::new(data.dim(), c, arch, config.seed)?;
    let mut optimizers: Vec<OptimizerState> = model.maps().map(OptimizerState::new).collect();
    let mut rng = Rng::derive(config.seed, 1);
    let trace = run_schedule(data.len(), config.batch_size, config.schedule, &mut rng, |idx, step, _| {
        let batch = data.features.select(Axis(0), idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = model.loss(batch.view(), &batch_labels)?;
        if loss.is_finite() {
            let maps = std::iter::once(&mut model.stem)
                .chain(model.blocks.iter_mut())
                .chain(std::iter::once(&mut model.head));
            for ((map, opt), g) in maps.zip(optimizers.iter_mut()).zip(&grads) {
                opt.adam_step(map, g, config.learning_rate, config.adam)?;
            }
        }
        Ok(LossRecord {
            step,
            loss,
            data_term: loss,
            reg_term: 0.0,
        })
    })?;
    Ok(TrainOutcome { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{DenseLayer, NormMap};
    use crate::data::gen_two_moons;
    use crate::kernels::KernelSpec;
    use ndarray::{array, Array1};

    fn set(v: &[f64], origin: Origin) -> ScoreSet {
        ScoreSet::new(v.to_vec(), origin).unwrap()
    }

    #[test]
    fn auroc_examples() {
        let a = auroc(&set(&[0.1, 0.2], Origin::Ind), &set(&[0.8, 0.9], Origin::Ood)).unwrap();
        assert_eq!(a, 1.0);
        let a = auroc(&set(&[0.1, 0.4], Origin::Ind), &set(&[0.3, 0.8], Origin::Ood)).unwrap();
        assert_eq!(a, 0.75);
        let a = auroc(&set(&[0.2, 0.2, 0.5], Origin::Ind), &set(&[0.5, 0.2, 0.2], Origin::Ood)).unwrap();
        assert_eq!(a, 0.5);
        assert!(auroc(&set(&[], Origin::Ind), &set(&[1.0], Origin::Ood)).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], Origin::Ind).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_score(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_score(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let e = entropy_score(&[0.731_058_578_630_004_9, 0.268_941_421_369_995_1]).unwrap();
        assert!((e - 0.582_203_5).abs() < 1e-6, "{e}");
        assert!(entropy_score(&[0.6, 0.6]).is_err());
        assert!(entropy_score(&[-0.1, 1.1]).is_err());
    }

    fn affine_model(bias: f64, a: f64) -> MorseModel {
        let map = FeatureMap::new(vec![DenseLayer::new(Array2::zeros((1, 2)), Some(array![bias]), Activation::Linear).unwrap()])
            .unwrap();
        MorseModel::unsupervised(map, KernelSpec::gaussian(1.0), vec![a]).unwrap()
    }

    #[test]
    fn scale_logits_examples() {
        let m = affine_model(0.0, 0.0);
        assert_eq!(scale_logits(&[2.0, -1.0], &m, &[3.0, 4.0]).unwrap(), vec![2.0, -1.0]);
        // μ = exp(−(√ln 2)²) = 1/2
        let m = affine_model(2f64.ln().sqrt(), 0.0);
        let s = scale_logits(&[2.0, -1.0], &m, &[0.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] + 0.5).abs() < 1e-15);
        let m = affine_model(40.0, 0.0);
        let p = softmax(&scale_logits(&[5.0, -3.0], &m, &[0.0, 0.0]).unwrap());
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(scale_logits(&[1.0], &m, &[0.0]).is_err());
    }

    #[test]
    fn score_records_are_consistent() {
        let sphere = MorseModel::unsupervised(NormMap { dim: 2 }, KernelSpec::gaussian(0.5), vec![1.0]).unwrap();
        let data = Dataset::new(array![[1.0, 0.0], [0.6, 0.8], [2.0, 0.0]], None, "test").unwrap();
        let records = score_dataset(&sphere, &data).unwrap();
        assert_eq!(records[0], ScoreRecord { mu: 1.0, s: 0.0, v: 0.0, t: 1.0 });
        for r in &records {
            assert!((r.s - (1.0 - r.mu)).abs() < 1e-12);
            assert!((r.t * r.mu - 1.0).abs() < 1e-12);
            assert!((r.v + r.mu.ln()).abs() < 1e-12);
        }
        let wrong = Dataset::new(array![[1.0]], None, "test").unwrap();
        assert!(score_dataset(&sphere, &wrong).is_err());
    }

    #[test]
    fn supervised_scores_clip_s() {
        let map = FeatureMap::new(vec![DenseLayer::new(Array2::zeros((2, 1)), Some(Array1::zeros(2)), Activation::Linear).unwrap()])
            .unwrap();
        // φ = 0 is equidistant from both targets at scale 0.1: μ = 2 e^{-0.01}
        let m = MorseModel::supervised(map, KernelSpec::gaussian(1.0), 2, 0.1).unwrap();
        let data = Dataset::new(array![[0.0]], None, "test").unwrap();
        let r = score_dataset(&m, &data).unwrap()[0];
        assert!(r.mu > 1.0);
        assert_eq!(r.s, 0.0);
        assert!(r.v < 0.0);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let arch = ClassifierArch {
            width: 5,
            blocks: 2,
            activation: Activation::Tanh,
            residual: true,
        };
        let head = ClassifierHead::new(2, 3, &arch, 9).unwrap();
        let x = array![[0.3, -0.5], [1.2, 0.1], [-0.7, 0.9]];
        let labels = [0, 2, 1];
        let (_, grads) = head.loss(x.view(), &labels).unwrap();
        let h = 1e-6;
        for (part, g) in grads.iter().enumerate() {
            let flat = g.flatten();
            let eval = |delta: f64| {
                let mut m = head.clone();
                let map = match part {
                    0 => &mut m.stem,
                    p if p <= m.blocks.len() => &mut m.blocks[p - 1],
                    _ => &mut m.head,
                };
                map.layers_mut()[0].params_mut().0[[0, 0]] += delta;
                m.loss(x.view(), &labels).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((flat[0] - numeric).abs() < 1e-7, "part {part}: {} vs {numeric}", flat[0]);
        }
    }

    #[test]
    fn classifier_fits_moons_deterministically() {
        let data = gen_two_moons(200, 0.1, 3).unwrap();
        let arch = ClassifierArch {
            width: 32,
            blocks: 2,
            ..Default::default()
        };
        let config = ClassifierConfig {
            learning_rate: 1e-2,
            batch_size: 64,
            schedule: Schedule::Epochs(40),
            seed: 5,
            ..Default::default()
        };
        let first = train_classifier(&data, &arch, &config).unwrap();
        assert!(first.model.accuracy(&data).unwrap() >= 0.95);
        let second = train_classifier(&data, &arch, &config).unwrap();
        assert_eq!(first.model, second.model);
        let p = first.model.probabilities(array![[0.5, 0.25]].view()).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }
}
