//! Training stages and baselines.
//!
//! The full adaptation pipeline is: pretrain `g` and `h` on the source
//! (stage 1, also the LB baseline), train the domain-class discriminator on
//! frozen embeddings (stage 2), then alternate between confusing the frozen
//! discriminator while classifying both domains, and re-training the
//! discriminator against the moving embedding (stage 3). Freezing is
//! expressed through the type system: a stage takes `&T` for networks it
//! must not touch and `&mut T` for networks it updates.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Examples;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::models::{
    BinaryDomainHead, BoundDcd, BoundEncoder, DomainClassDiscriminator, Encoder, ModelBundle,
    PredictorHead,
};
use crate::pairs::{GroupedPairs, PairBatches, PairGroup, PairRecord};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

const EVAL_BATCH: usize = 512;
const DCD_HOLDOUT_FRAC: f64 = 0.1;
const DCD_HOLDOUT_CAP: usize = 256;

/// Hyperparameters for every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the confusion term in the stage-3 objective.
    pub gamma: f64,
    pub lr_pretrain: f64,
    pub lr_dcd: f64,
    pub lr_adv: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain: usize,
    pub epochs_dcd: usize,
    pub epochs_adv: usize,
    pub epochs_finetune: usize,
    /// Classification mini-batch size (stages 1 and 3, baselines).
    pub batch_class: usize,
    /// Pair mini-batch size; must be a positive multiple of 4.
    pub batch_pairs: usize,
    /// Discriminator updates per embedding/predictor update in stage 3.
    pub dcd_steps_per_gh_step: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub n_shot: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            lr_pretrain: 1e-3,
            lr_dcd: 1e-3,
            lr_adv: 1e-4,
            lr_finetune: 1e-3,
            epochs_pretrain: 20,
            epochs_dcd: 10,
            epochs_adv: 30,
            epochs_finetune: 50,
            batch_class: 32,
            batch_pairs: 64,
            dcd_steps_per_gh_step: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            n_shot: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.gamma < 0.0 {
            problems.push(format!("gamma {} must be non-negative", self.gamma));
        }
        for (name, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_dcd", self.lr_dcd),
            ("lr_adv", self.lr_adv),
            ("lr_finetune", self.lr_finetune),
        ] {
            if !(lr > 0.0) {
                problems.push(format!("{name} {lr} must be positive"));
            }
        }
        if self.n_shot < 1 {
            problems.push("n_shot must be at least 1".to_string());
        }
        if self.batch_class < 1 {
            problems.push("batch_class must be at least 1".to_string());
        }
        if self.batch_pairs < 4 || self.batch_pairs % 4 != 0 {
            problems.push(format!("batch_pairs {} must be a positive multiple of 4", self.batch_pairs));
        }
        if self.dcd_steps_per_gh_step < 1 {
            problems.push("dcd_steps_per_gh_step must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid("train_config", problems.join("; ")))
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }
}

/// Optional validation sets evaluated at every epoch.
#[derive(Clone, Copy)]
pub struct EvalSets<'a, D> {
    pub source_val: Option<&'a D>,
    pub target_val: Option<&'a D>,
}

impl<'a, D> Default for EvalSets<'a, D> {
    fn default() -> Self {
        EvalSets { source_val: None, target_val: None }
    }
}

/// Per-epoch observations; stages fill the fields they produce.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_class_source: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_class_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_confusion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dcd: Option<f64>,
    /// Four-way accuracy of the discriminator on held-out pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcd_holdout_acc: Option<f64>,
    /// Binary separability of group 1 versus group 2 on held-out pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcd_separability_12: Option<f64>,
    /// Binary separability of group 3 versus group 4 on held-out pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dcd_separability_34: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_source_val: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_target_val: Option<f64>,
}

/// One stage's per-epoch metric stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub epochs: Vec<EpochMetrics>,
}

impl StageMetrics {
    fn new(stage: &str) -> Self {
        StageMetrics { stage: stage.to_string(), epochs: Vec::new() }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// All loss and accuracy values must be finite.
    pub fn all_finite(&self) -> bool {
        self.epochs.iter().all(|e| {
            [
                e.loss_class_source,
                e.loss_class_target,
                e.loss_confusion,
                e.loss_total,
                e.loss_dcd,
                e.dcd_holdout_acc,
                e.dcd_separability_12,
                e.dcd_separability_34,
                e.acc_source_val,
                e.acc_target_val,
            ]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
        })
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn shuffled_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut rows: Vec<u32> = (0..n as u32).collect();
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    rows
}

fn rows_with_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..k).map(|_| rng.random_range(0..n) as u32).collect()
}

/// Forward-only embeddings for every row of a dataset.
pub fn embed_all<D: Examples>(encoder: &Encoder<f32>, ds: &D) -> Result<Tensor<f32>> {
    let mut out: Vec<f32> = Vec::with_capacity(ds.len() * encoder.out_dim());
    let rows: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.leaf(ds.gather_inputs(chunk)?);
        let bound = encoder.bind(&mut tape);
        let z = bound.forward(&mut tape, x)?;
        out.extend_from_slice(tape.value_of(z).data());
    }
    Tensor::new(vec![ds.len(), encoder.out_dim()], out)
}

/// Accuracy and per-class breakdown of `h(g(x))` against the labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    pub correct: usize,
    pub total: usize,
}

pub fn evaluate<D: Examples>(
    encoder: &Encoder<f32>,
    predictor: &PredictorHead<f32>,
    ds: &D,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let classes = predictor.classes();
    let mut correct = 0usize;
    let mut class_correct = vec![0usize; classes];
    let mut class_counts = vec![0usize; classes];
    let rows: Vec<u32> = (0..ds.len() as u32).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let x = tape.leaf(ds.gather_inputs(chunk)?);
        let enc = encoder.bind(&mut tape);
        let z = enc.forward(&mut tape, x)?;
        let head = predictor.bind(&mut tape);
        let p = head.forward(&mut tape, z)?;
        let probs = tape.value_of(p);
        for (bi, &row) in chunk.iter().enumerate() {
            let prow = &probs.data()[bi * classes..(bi + 1) * classes];
            let mut arg = 0usize;
            for k in 1..classes {
                if prow[k] > prow[arg] {
                    arg = k;
                }
            }
            let truth = usize::from(ds.labels()[row as usize]);
            class_counts[truth] += 1;
            if arg == truth {
                correct += 1;
                class_correct[truth] += 1;
            }
        }
    }
    let per_class_accuracy = class_correct
        .iter()
        .zip(&class_counts)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        per_class_accuracy,
        per_class_counts: class_counts,
        correct,
        total: ds.len(),
    })
}

fn epoch_eval<D: Examples>(
    encoder: &Encoder<f32>,
    predictor: &PredictorHead<f32>,
    eval: &EvalSets<D>,
    m: &mut EpochMetrics,
) -> Result<()> {
    if let Some(ds) = eval.source_val {
        m.acc_source_val = Some(evaluate(encoder, predictor, ds)?.accuracy);
    }
    if let Some(ds) = eval.target_val {
        m.acc_target_val = Some(evaluate(encoder, predictor, ds)?.accuracy);
    }
    Ok(())
}

/// Running mean over batches weighted by batch size.
#[derive(Default)]
struct MeanAcc {
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn add(&mut self, value: f64, count: usize) {
        self.sum += value * count as f64;
        self.count += count;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 1: source pretraining (the LB model)
// ---------------------------------------------------------------------------

/// Minimizes batch-mean cross-entropy of `h(g(x))` on the source set.
pub fn pretrain_source<D: Examples>(
    encoder: &mut Encoder<f32>,
    predictor: &mut PredictorHead<f32>,
    source_train: &D,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if source_train.is_empty() {
        return Err(Error::invalid("pretrain_source", "empty source set"));
    }
    train_classifier(
        encoder,
        predictor,
        source_train,
        eval,
        cfg,
        cfg.lr_pretrain,
        cfg.epochs_pretrain,
        derive_seed(cfg.seed, "pretrain"),
        "pretrain",
    )
}

/// Continues training the LB model on the few-shot target set only.
pub fn finetune_baseline<D: Examples>(
    encoder: &mut Encoder<f32>,
    predictor: &mut PredictorHead<f32>,
    target_train: &D,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if target_train.is_empty() {
        return Err(Error::invalid("finetune_baseline", "empty target set"));
    }
    train_classifier(
        encoder,
        predictor,
        target_train,
        eval,
        cfg,
        cfg.lr_finetune,
        cfg.epochs_finetune,
        derive_seed(cfg.seed, "finetune"),
        "finetune",
    )
}

#[allow(clippy::too_many_arguments)]
fn train_classifier<D: Examples>(
    encoder: &mut Encoder<f32>,
    predictor: &mut PredictorHead<f32>,
    train: &D,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
    stage: &str,
) -> Result<StageMetrics> {
    let mut adam = {
        let mut params = encoder.params();
        params.extend(predictor.params());
        AdamState::new(cfg.adam(lr), &params)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metrics = StageMetrics::new(stage);
    let batch = cfg.batch_class.min(train.len());
    for epoch in 0..epochs {
        let rows = shuffled_rows(train.len(), &mut rng);
        let mut loss_acc = MeanAcc::default();
        for chunk in rows.chunks(batch) {
            let mut tape = Tape::new();
            let x = tape.leaf(train.gather_inputs(chunk)?);
            let labels: Vec<u8> = chunk.iter().map(|&r| train.labels()[r as usize]).collect();
            let enc = encoder.bind(&mut tape);
            let z = enc.forward(&mut tape, x)?;
            let head = predictor.bind(&mut tape);
            let p = head.forward(&mut tape, z)?;
            let loss = tape.cross_entropy(p, &labels)?;
            tape.backward(loss)?;
            encoder.write_grads(&tape, &enc);
            predictor.write_grads(&tape, &head);
            let mut params = encoder.params_mut();
            params.extend(predictor.params_mut());
            adam.step(&mut params)?;
            loss_acc.add(tape.value_of(loss).item()?.into(), chunk.len());
        }
        let mut m = EpochMetrics { epoch, ..Default::default() };
        let mean = loss_acc.mean();
        if stage == "finetune" {
            m.loss_class_target = Some(mean);
        } else {
            m.loss_class_source = Some(mean);
        }
        epoch_eval(encoder, predictor, eval, &mut m)?;
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

/// Joint source plus few-shot-target classification without any adversarial
/// term; the reference point that a gamma = 0 adaptation run must match.
pub fn finetune_joint<D: Examples>(
    encoder: &mut Encoder<f32>,
    predictor: &mut PredictorHead<f32>,
    source_train: &D,
    target_train: &D,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if source_train.is_empty() || target_train.is_empty() {
        return Err(Error::invalid("finetune_joint", "empty training set"));
    }
    let mut adam = {
        let mut params = encoder.params();
        params.extend(predictor.params());
        AdamState::new(cfg.adam(cfg.lr_adv), &params)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune-joint"));
    let mut metrics = StageMetrics::new("finetune-joint");
    let steps_per_epoch = source_train.len().div_ceil(cfg.batch_class);
    for epoch in 0..cfg.epochs_adv {
        let src_rows = shuffled_rows(source_train.len(), &mut rng);
        let mut loss_s = MeanAcc::default();
        let mut loss_t = MeanAcc::default();
        for step in 0..steps_per_epoch {
            let lo = step * cfg.batch_class;
            let hi = ((step + 1) * cfg.batch_class).min(src_rows.len());
            let src_chunk = &src_rows[lo..hi];
            let tgt_chunk = rows_with_replacement(target_train.len(), cfg.batch_class, &mut rng);

            let mut tape = Tape::new();
            let enc = encoder.bind(&mut tape);
            let head = predictor.bind(&mut tape);
            let xs = tape.leaf(source_train.gather_inputs(src_chunk)?);
            let zs = enc.forward(&mut tape, xs)?;
            let ps = head.forward(&mut tape, zs)?;
            let ys: Vec<u8> = src_chunk.iter().map(|&r| source_train.labels()[r as usize]).collect();
            let ce_s = tape.cross_entropy(ps, &ys)?;
            let xt = tape.leaf(target_train.gather_inputs(&tgt_chunk)?);
            let zt = enc.forward(&mut tape, xt)?;
            let pt = head.forward(&mut tape, zt)?;
            let yt: Vec<u8> = tgt_chunk.iter().map(|&r| target_train.labels()[r as usize]).collect();
            let ce_t = tape.cross_entropy(pt, &yt)?;
            let total = tape.add(ce_s, ce_t)?;
            tape.backward(total)?;
            encoder.write_grads(&tape, &enc);
            predictor.write_grads(&tape, &head);
            let mut params = encoder.params_mut();
            params.extend(predictor.params_mut());
            adam.step(&mut params)?;
            loss_s.add(tape.value_of(ce_s).item()?.into(), src_chunk.len());
            loss_t.add(tape.value_of(ce_t).item()?.into(), tgt_chunk.len());
        }
        let mut m = EpochMetrics {
            epoch,
            loss_class_source: Some(loss_s.mean()),
            loss_class_target: Some(loss_t.mean()),
            loss_total: Some(loss_s.mean() + loss_t.mean()),
            ..Default::default()
        };
        epoch_eval(encoder, predictor, eval, &mut m)?;
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Discriminator loss graphs
// ---------------------------------------------------------------------------

/// Four-way cross-entropy of the discriminator on embedded pairs against
/// their group numbers (1..=4).
pub fn dcd_loss<E: crate::tensor::Scalar>(
    tape: &mut Tape<E>,
    dcd: &BoundDcd,
    za: Var,
    zb: Var,
    groups: &[u8],
) -> Result<Var> {
    let labels: Vec<u8> = groups
        .iter()
        .map(|&g| PairGroup::from_number(g).map(|g| g.class_index()))
        .collect::<Result<_>>()?;
    let p = dcd.forward(tape, za, zb)?;
    tape.cross_entropy(p, &labels)
}

fn gather_pair_sides<D: Examples, T: Examples>(
    pairs: &[PairRecord],
    source: &D,
    target: &T,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let firsts: Vec<u32> = pairs.iter().map(|p| p.first_index).collect();
    let first_inputs = source.gather_inputs(&firsts)?;
    // slot two may mix domains only across calls, never within a group batch
    let second_inputs = match pairs.first().map(|p| p.second_domain) {
        Some(crate::pairs::Domain::Source) => {
            let seconds: Vec<u32> = pairs.iter().map(|p| p.second_index).collect();
            source.gather_inputs(&seconds)?
        }
        _ => {
            let seconds: Vec<u32> = pairs.iter().map(|p| p.second_index).collect();
            target.gather_inputs(&seconds)?
        }
    };
    Ok((first_inputs, second_inputs))
}

/// Embeds both sides of a same-group pair batch under the bound encoder.
fn embed_pair_batch<D: Examples, T: Examples>(
    tape: &mut Tape<f32>,
    enc: &BoundEncoder,
    pairs: &[PairRecord],
    source: &D,
    target: &T,
) -> Result<(Var, Var)> {
    let (first_inputs, second_inputs) = gather_pair_sides(pairs, source, target)?;
    let xa = tape.leaf(first_inputs);
    let xb = tape.leaf(second_inputs);
    let za = enc.forward(tape, xa)?;
    let zb = enc.forward(tape, xb)?;
    Ok((za, zb))
}

/// Confusion objective on a frozen discriminator: group-2 pairs are scored
/// against the group-1 label and group-4 pairs against the group-3 label,
/// both with positive weight. Gradients flow only into the encoder vars.
fn confusion_term<D: Examples, T: Examples>(
    tape: &mut Tape<f32>,
    enc: &BoundEncoder,
    dcd: &BoundDcd,
    pairs: &[PairRecord],
    source: &D,
    target: &T,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("confusion_loss", "no pairs supplied"));
    }
    if let Some(bad) = pairs
        .iter()
        .find(|p| !matches!(p.group, PairGroup::CrossSame | PairGroup::CrossDiff))
    {
        return Err(Error::invalid(
            "confusion_loss",
            format!("pair from group {} given; only groups 2 and 4 participate", bad.group.number()),
        ));
    }
    let g2: Vec<PairRecord> = pairs.iter().copied().filter(|p| p.group == PairGroup::CrossSame).collect();
    let g4: Vec<PairRecord> = pairs.iter().copied().filter(|p| p.group == PairGroup::CrossDiff).collect();
    let mut terms = Vec::new();
    for (subset, target_group) in [(g2, PairGroup::SourceSame), (g4, PairGroup::SourceDiff)] {
        if subset.is_empty() {
            continue;
        }
        let (za, zb) = embed_pair_batch(tape, enc, &subset, source, target)?;
        let p = dcd.forward(tape, za, zb)?;
        let labels = vec![target_group.class_index(); subset.len()];
        terms.push(tape.cross_entropy(p, &labels)?);
    }
    match terms.len() {
        1 => Ok(terms[0]),
        2 => tape.add(terms[0], terms[1]),
        _ => unreachable!(),
    }
}

/// Standalone confusion loss: binds the encoder for gradients and the
/// discriminator as frozen constants, then builds the two-term objective.
pub fn confusion_loss<D: Examples, T: Examples>(
    tape: &mut Tape<f32>,
    dcd: &DomainClassDiscriminator<f32>,
    encoder: &Encoder<f32>,
    pairs: &[PairRecord],
    source: &D,
    target: &T,
) -> Result<(Var, BoundEncoder)> {
    let enc = encoder.bind(tape);
    let dcd_bound = dcd.bind(tape);
    let loss = confusion_term(tape, &enc, &dcd_bound, pairs, source, target)?;
    Ok((loss, enc))
}

// ---------------------------------------------------------------------------
// Stage 2: discriminator training against a frozen embedding
// ---------------------------------------------------------------------------

struct PairEmbeddings {
    source: Tensor<f32>,
    target: Tensor<f32>,
    dim: usize,
}

impl PairEmbeddings {
    fn gather(&self, pairs: &[PairRecord]) -> (Tensor<f32>, Tensor<f32>, Vec<u8>) {
        let dim = self.dim;
        let mut za = Vec::with_capacity(pairs.len() * dim);
        let mut zb = Vec::with_capacity(pairs.len() * dim);
        let mut groups = Vec::with_capacity(pairs.len());
        for p in pairs {
            let a = p.first_index as usize;
            za.extend_from_slice(&self.source.data()[a * dim..(a + 1) * dim]);
            let b = p.second_index as usize;
            let side = match p.second_domain {
                crate::pairs::Domain::Source => &self.source,
                crate::pairs::Domain::Target => &self.target,
            };
            zb.extend_from_slice(&side.data()[b * dim..(b + 1) * dim]);
            groups.push(p.group.number());
        }
        (
            Tensor::new(vec![pairs.len(), dim], za).expect("sized above"),
            Tensor::new(vec![pairs.len(), dim], zb).expect("sized above"),
            groups,
        )
    }
}

fn embed_for_pairs<D: Examples, T: Examples>(
    encoder: &Encoder<f32>,
    source: &D,
    target: &T,
) -> Result<PairEmbeddings> {
    Ok(PairEmbeddings {
        source: embed_all(encoder, source)?,
        target: embed_all(encoder, target)?,
        dim: encoder.out_dim(),
    })
}

/// Held-out discriminator quality: four-way accuracy plus the binary
/// separability of groups 1 vs 2 and 3 vs 4.
fn dcd_holdout_metrics(
    dcd: &DomainClassDiscriminator<f32>,
    emb: &PairEmbeddings,
    holdout: &GroupedPairs,
) -> Result<(f64, f64, f64)> {
    let mut correct4 = 0usize;
    let mut total4 = 0usize;
    let mut correct12 = 0usize;
    let mut total12 = 0usize;
    let mut correct34 = 0usize;
    let mut total34 = 0usize;
    for g in PairGroup::ALL {
        let pairs = holdout.group(g);
        for chunk in pairs.chunks(EVAL_BATCH) {
            let (za, zb, _) = emb.gather(chunk);
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(za), tape.leaf(zb));
            let bound = dcd.bind(&mut tape);
            let p = bound.forward(&mut tape, va, vb)?;
            let probs = tape.value_of(p);
            for bi in 0..chunk.len() {
                let row = &probs.data()[bi * 4..(bi + 1) * 4];
                let mut arg = 0usize;
                for k in 1..4 {
                    if row[k] > row[arg] {
                        arg = k;
                    }
                }
                let truth = g.class_index() as usize;
                total4 += 1;
                if arg == truth {
                    correct4 += 1;
                }
                if truth == 0 || truth == 1 {
                    total12 += 1;
                    let pick = if row[0] >= row[1] { 0 } else { 1 };
                    if pick == truth {
                        correct12 += 1;
                    }
                } else {
                    total34 += 1;
                    let pick = if row[2] >= row[3] { 2 } else { 3 };
                    if pick == truth {
                        correct34 += 1;
                    }
                }
            }
        }
    }
    let ratio = |c: usize, t: usize| if t == 0 { f64::NAN } else { c as f64 / t as f64 };
    Ok((ratio(correct4, total4), ratio(correct12, total12), ratio(correct34, total34)))
}

/// Trains the discriminator on pairs embedded by a frozen encoder. The
/// encoder is immutable here, which is the freeze contract.
pub fn train_dcd<D: Examples, T: Examples>(
    dcd: &mut DomainClassDiscriminator<f32>,
    encoder: &Encoder<f32>,
    gp: &GroupedPairs,
    source: &D,
    target: &T,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if PairGroup::ALL.iter().any(|&g| gp.group(g).len() != gp.balanced_len()) {
        return Err(Error::invalid("train_dcd", "pair groups are not balanced"));
    }
    let emb = embed_for_pairs(encoder, source, target)?;
    let (train, holdout) =
        gp.split_holdout(DCD_HOLDOUT_FRAC, DCD_HOLDOUT_CAP, derive_seed(cfg.seed, "pair-holdout"));
    let stream = PairBatches::new(&train, cfg.batch_pairs, derive_seed(cfg.seed, "dcd-batches"))?;
    let mut adam = AdamState::new(cfg.adam(cfg.lr_dcd), &dcd.params())?;
    let mut metrics = StageMetrics::new("dcd");
    for epoch in 0..cfg.epochs_dcd {
        let mut loss_acc = MeanAcc::default();
        for batch in stream.epoch(epoch as u64) {
            let (za, zb, groups) = emb.gather(&batch);
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(za), tape.leaf(zb));
            let bound = dcd.bind(&mut tape);
            let loss = dcd_loss(&mut tape, &bound, va, vb, &groups)?;
            tape.backward(loss)?;
            dcd.write_grads(&tape, &bound);
            adam.step(&mut dcd.params_mut())?;
            loss_acc.add(tape.value_of(loss).item()?.into(), batch.len());
        }
        let (acc4, sep12, sep34) = dcd_holdout_metrics(dcd, &emb, &holdout)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            loss_dcd: Some(loss_acc.mean()),
            dcd_holdout_acc: Some(acc4),
            dcd_separability_12: Some(sep12),
            dcd_separability_34: Some(sep34),
            ..Default::default()
        });
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Stage 3: the alternating game
// ---------------------------------------------------------------------------

/// Losses observed in one alternation step.
#[derive(Clone, Copy, Debug)]
pub struct FadaStepLosses {
    pub confusion: f64,
    pub class_source: f64,
    pub class_target: f64,
    /// `gamma * confusion + class_source + class_target`
    pub total: f64,
    pub dcd: f64,
}

/// One alternation: (a) update `g`,`h` against the frozen discriminator with
/// the weighted confusion plus both classification terms; (b) update the
/// discriminator on the same pair batch under the moved embedding,
/// `dcd_steps_per_gh_step` times.
#[allow(clippy::too_many_arguments)]
pub fn fada_step<D: Examples, T: Examples>(
    bundle: &mut ModelBundle<f32>,
    adam_gh: &mut AdamState<f32>,
    adam_d: &mut AdamState<f32>,
    pair_batch: &[PairRecord],
    src_rows: &[u32],
    tgt_rows: &[u32],
    source: &D,
    target_train: &T,
    cfg: &TrainConfig,
) -> Result<FadaStepLosses> {
    // (a) freeze the discriminator, move encoder and predictor
    let gamma = cfg.gamma as f32;
    let (confusion, class_source, class_target) = {
        let mut tape = Tape::new();
        let enc = bundle.encoder.bind(&mut tape);
        let head = bundle.predictor.bind(&mut tape);
        let dcd_frozen = bundle.dcd.bind(&mut tape);

        let cross_pairs: Vec<PairRecord> = pair_batch
            .iter()
            .copied()
            .filter(|p| matches!(p.group, PairGroup::CrossSame | PairGroup::CrossDiff))
            .collect();
        let conf = confusion_term(&mut tape, &enc, &dcd_frozen, &cross_pairs, source, target_train)?;

        let xs = tape.leaf(source.gather_inputs(src_rows)?);
        let zs = enc.forward(&mut tape, xs)?;
        let ps = head.forward(&mut tape, zs)?;
        let ys: Vec<u8> = src_rows.iter().map(|&r| source.labels()[r as usize]).collect();
        let ce_s = tape.cross_entropy(ps, &ys)?;

        let xt = tape.leaf(target_train.gather_inputs(tgt_rows)?);
        let zt = enc.forward(&mut tape, xt)?;
        let pt = head.forward(&mut tape, zt)?;
        let yt: Vec<u8> = tgt_rows.iter().map(|&r| target_train.labels()[r as usize]).collect();
        let ce_t = tape.cross_entropy(pt, &yt)?;

        let weighted = tape.scale(conf, gamma);
        let partial = tape.add(weighted, ce_s)?;
        let total = tape.add(partial, ce_t)?;
        tape.backward(total)?;
        bundle.encoder.write_grads(&tape, &enc);
        bundle.predictor.write_grads(&tape, &head);
        let mut params = bundle.encoder.params_mut();
        params.extend(bundle.predictor.params_mut());
        adam_gh.step(&mut params)?;
        (
            f64::from(tape.value_of(conf).item()?),
            f64::from(tape.value_of(ce_s).item()?),
            f64::from(tape.value_of(ce_t).item()?),
        )
    };

    // (b) freeze encoder and predictor, move the discriminator
    let mut dcd_loss_value = 0.0;
    for _ in 0..cfg.dcd_steps_per_gh_step {
        let emb = {
            let mut tape = Tape::new();
            let enc = bundle.encoder.bind(&mut tape);
            let mut za = Vec::new();
            let mut zb = Vec::new();
            let mut groups = Vec::new();
            for group in PairGroup::ALL {
                let subset: Vec<PairRecord> =
                    pair_batch.iter().copied().filter(|p| p.group == group).collect();
                if subset.is_empty() {
                    continue;
                }
                let (xa, xb) = gather_pair_sides(&subset, source, target_train)?;
                let va = tape.leaf(xa);
                let vb = tape.leaf(xb);
                let ea = enc.forward(&mut tape, va)?;
                let eb = enc.forward(&mut tape, vb)?;
                za.extend_from_slice(tape.value_of(ea).data());
                zb.extend_from_slice(tape.value_of(eb).data());
                groups.extend(subset.iter().map(|p| p.group.number()));
            }
            let dim = bundle.encoder.out_dim();
            let n = groups.len();
            (Tensor::new(vec![n, dim], za)?, Tensor::new(vec![n, dim], zb)?, groups)
        };
        let (za, zb, groups) = emb;
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(za), tape.leaf(zb));
        let bound = bundle.dcd.bind(&mut tape);
        let loss = dcd_loss(&mut tape, &bound, va, vb, &groups)?;
        tape.backward(loss)?;
        bundle.dcd.write_grads(&tape, &bound);
        adam_d.step(&mut bundle.dcd.params_mut())?;
        dcd_loss_value = f64::from(tape.value_of(loss).item()?);
    }

    Ok(FadaStepLosses {
        confusion,
        class_source,
        class_target,
        total: gamma as f64 * confusion + class_source + class_target,
        dcd: dcd_loss_value,
    })
}

/// Runs the full alternating stage over the grouped pairs for
/// `epochs_adv` epochs.
pub fn fada_loop<D: Examples, T: Examples>(
    bundle: &mut ModelBundle<f32>,
    source: &D,
    target_train: &T,
    gp: &GroupedPairs,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if gp.balanced_len() == 0 {
        return Err(Error::invalid("fada_loop", "no pairs to train on"));
    }
    if target_train.is_empty() {
        return Err(Error::invalid("fada_loop", "empty target training set"));
    }
    let (train_pairs, holdout_pairs) =
        gp.split_holdout(DCD_HOLDOUT_FRAC, DCD_HOLDOUT_CAP, derive_seed(cfg.seed, "pair-holdout"));
    let stream = PairBatches::new(&train_pairs, cfg.batch_pairs, derive_seed(cfg.seed, "adv-batches"))?;
    let mut adam_gh = {
        let mut params = bundle.encoder.params();
        params.extend(bundle.predictor.params());
        AdamState::new(cfg.adam(cfg.lr_adv), &params)?
    };
    let mut adam_d = AdamState::new(cfg.adam(cfg.lr_dcd), &bundle.dcd.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "adv-class"));
    let mut src_cycle: Vec<u32> = Vec::new();
    let mut src_pos = 0usize;
    let mut metrics = StageMetrics::new("adversarial");

    for epoch in 0..cfg.epochs_adv {
        let mut conf_acc = MeanAcc::default();
        let mut ce_s_acc = MeanAcc::default();
        let mut ce_t_acc = MeanAcc::default();
        let mut dcd_acc = MeanAcc::default();
        for batch in stream.epoch(epoch as u64) {
            let take = cfg.batch_class.min(source.len());
            if src_pos + take > src_cycle.len() {
                src_cycle = shuffled_rows(source.len(), &mut rng);
                src_pos = 0;
            }
            let src_rows = src_cycle[src_pos..src_pos + take].to_vec();
            src_pos += take;
            let tgt_rows = rows_with_replacement(target_train.len(), cfg.batch_class, &mut rng);
            let losses = fada_step(
                bundle,
                &mut adam_gh,
                &mut adam_d,
                &batch,
                &src_rows,
                &tgt_rows,
                source,
                target_train,
                cfg,
            )?;
            conf_acc.add(losses.confusion, batch.len());
            ce_s_acc.add(losses.class_source, src_rows.len());
            ce_t_acc.add(losses.class_target, tgt_rows.len());
            dcd_acc.add(losses.dcd, batch.len());
        }
        let emb = embed_for_pairs(&bundle.encoder, source, target_train)?;
        let (acc4, sep12, sep34) = dcd_holdout_metrics(&bundle.dcd, &emb, &holdout_pairs)?;
        let mut m = EpochMetrics {
            epoch,
            loss_confusion: Some(conf_acc.mean()),
            loss_class_source: Some(ce_s_acc.mean()),
            loss_class_target: Some(ce_t_acc.mean()),
            loss_total: Some(cfg.gamma * conf_acc.mean() + ce_s_acc.mean() + ce_t_acc.mean()),
            loss_dcd: Some(dcd_acc.mean()),
            dcd_holdout_acc: Some(acc4),
            dcd_separability_12: Some(sep12),
            dcd_separability_34: Some(sep34),
            ..Default::default()
        };
        epoch_eval(&bundle.encoder, &bundle.predictor, eval, &mut m)?;
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Binary adversarial baseline (unsupervised-style)
// ---------------------------------------------------------------------------

/// Alternating binary domain discrimination and inverted-label confusion
/// plus source classification. Target labels are never read.
pub fn uda_binary_baseline<D: Examples, T: Examples>(
    encoder: &mut Encoder<f32>,
    predictor: &mut PredictorHead<f32>,
    dbin: &mut BinaryDomainHead<f32>,
    source: &D,
    target_unlabeled: &T,
    eval: &EvalSets<D>,
    cfg: &TrainConfig,
) -> Result<StageMetrics> {
    cfg.validate()?;
    if source.is_empty() || target_unlabeled.is_empty() {
        return Err(Error::invalid("uda_binary_baseline", "empty domain pool"));
    }
    let mut adam_g = {
        let mut params = encoder.params();
        params.extend(predictor.params());
        AdamState::new(cfg.adam(cfg.lr_adv), &params)?
    };
    let mut adam_d = AdamState::new(cfg.adam(cfg.lr_dcd), &dbin.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "uda"));
    let mut metrics = StageMetrics::new("uda-binary");
    let steps_per_epoch = source.len().div_ceil(cfg.batch_class);

    for epoch in 0..cfg.epochs_adv {
        let src_rows_all = shuffled_rows(source.len(), &mut rng);
        let mut d_loss = MeanAcc::default();
        let mut g_loss = MeanAcc::default();
        for step in 0..steps_per_epoch {
            let lo = step * cfg.batch_class;
            let hi = ((step + 1) * cfg.batch_class).min(src_rows_all.len());
            let src_rows = &src_rows_all[lo..hi];
            let tgt_rows = rows_with_replacement(target_unlabeled.len(), cfg.batch_class, &mut rng);

            // discriminator step on frozen embeddings: source -> 0, target -> 1
            {
                let zs = {
                    let mut tape = Tape::new();
                    let enc = encoder.bind(&mut tape);
                    let x = tape.leaf(source.gather_inputs(src_rows)?);
                    let z = enc.forward(&mut tape, x)?;
                    tape.value_of(z).clone()
                };
                let zt = {
                    let mut tape = Tape::new();
                    let enc = encoder.bind(&mut tape);
                    let x = tape.leaf(target_unlabeled.gather_inputs(&tgt_rows)?);
                    let z = enc.forward(&mut tape, x)?;
                    tape.value_of(z).clone()
                };
                let mut tape = Tape::new();
                let (vs, vt) = (tape.leaf(zs), tape.leaf(zt));
                let bound = dbin.bind(&mut tape);
                let ps = bound.forward(&mut tape, vs)?;
                let pt = bound.forward(&mut tape, vt)?;
                let ce_s = tape.cross_entropy(ps, &vec![0u8; src_rows.len()])?;
                let ce_t = tape.cross_entropy(pt, &vec![1u8; tgt_rows.len()])?;
                let loss = tape.add(ce_s, ce_t)?;
                tape.backward(loss)?;
                dbin.write_grads(&tape, &bound);
                adam_d.step(&mut dbin.params_mut())?;
                d_loss.add(tape.value_of(loss).item()?.into(), src_rows.len() + tgt_rows.len());
            }

            // generator step: make target embeddings look source-like while
            // keeping source classification sharp
            {
                let mut tape = Tape::new();
                let enc = encoder.bind(&mut tape);
                let head = predictor.bind(&mut tape);
                let dbin_frozen = dbin.bind(&mut tape);

                let xt = tape.leaf(target_unlabeled.gather_inputs(&tgt_rows)?);
                let zt = enc.forward(&mut tape, xt)?;
                let pt = dbin_frozen.forward(&mut tape, zt)?;
                let fool = tape.cross_entropy(pt, &vec![0u8; tgt_rows.len()])?;

                let xs = tape.leaf(source.gather_inputs(src_rows)?);
                let zs = enc.forward(&mut tape, xs)?;
                let ps = head.forward(&mut tape, zs)?;
                let ys: Vec<u8> = src_rows.iter().map(|&r| source.labels()[r as usize]).collect();
                let ce_s = tape.cross_entropy(ps, &ys)?;

                let loss = tape.add(fool, ce_s)?;
                tape.backward(loss)?;
                encoder.write_grads(&tape, &enc);
                predictor.write_grads(&tape, &head);
                let mut params = encoder.params_mut();
                params.extend(predictor.params_mut());
                adam_g.step(&mut params)?;
                g_loss.add(tape.value_of(loss).item()?.into(), tgt_rows.len());
            }
        }

        // balanced held-out domain accuracy of the binary discriminator
        let domain_acc = match (eval.source_val, eval.target_val) {
            (Some(sv), Some(tv)) => {
                let acc_s = binary_domain_accuracy(encoder, dbin, sv, 0)?;
                let acc_t = binary_domain_accuracy(encoder, dbin, tv, 1)?;
                Some((acc_s + acc_t) / 2.0)
            }
            _ => None,
        };
        let mut m = EpochMetrics {
            epoch,
            loss_dcd: Some(d_loss.mean()),
            loss_total: Some(g_loss.mean()),
            dcd_holdout_acc: domain_acc,
            ..Default::default()
        };
        epoch_eval(encoder, predictor, eval, &mut m)?;
        metrics.epochs.push(m);
    }
    Ok(metrics)
}

fn binary_domain_accuracy<D: Examples>(
    encoder: &Encoder<f32>,
    dbin: &BinaryDomainHead<f32>,
    ds: &D,
    domain_label: usize,
) -> Result<f64> {
    let emb = embed_all(encoder, ds)?;
    let n = ds.len();
    let mut correct = 0usize;
    let rows: Vec<u32> = (0..n as u32).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let z = emb.gather_rows(chunk)?;
        let mut tape = Tape::new();
        let v = tape.leaf(z);
        let bound = dbin.bind(&mut tape);
        let p = bound.forward(&mut tape, v)?;
        let probs = tape.value_of(p);
        for bi in 0..chunk.len() {
            let row = &probs.data()[bi * 2..(bi + 1) * 2];
            let pick = if row[0] >= row[1] { 0 } else { 1 };
            if pick == domain_label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Semantic alignment proxy
// ---------------------------------------------------------------------------

/// Mean Euclidean distance between embeddings of same-class cross-domain
/// pairs, subsampled to at most `max_pairs`. Dropping distance from the LB
/// model to the adapted model indicates the classes have been pulled
/// together across domains.
pub fn mean_same_class_cross_domain_distance<D: Examples, T: Examples>(
    encoder: &Encoder<f32>,
    source: &D,
    target: &T,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let pairs = crate::pairs::enumerate_g2(source, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<PairRecord> = if pairs.len() <= max_pairs {
        pairs
    } else {
        let mut order: Vec<u32> = (0..pairs.len() as u32).collect();
        for i in 0..max_pairs {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        order[..max_pairs].iter().map(|&i| pairs[i as usize]).collect()
    };
    let src_emb = embed_all(encoder, source)?;
    let tgt_emb = embed_all(encoder, target)?;
    let dim = encoder.out_dim();
    let mut total = 0.0f64;
    for p in &chosen {
        let a = &src_emb.data()[p.first_index as usize * dim..(p.first_index as usize + 1) * dim];
        let b = &tgt_emb.data()[p.second_index as usize * dim..(p.second_index as usize + 1) * dim];
        let mut d2 = 0.0f64;
        for i in 0..dim {
            let d = f64::from(a[i]) - f64::from(b[i]);
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    Ok(total / chosen.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VectorDataset;
    use crate::models::{init_vector_models, VectorEmbeddingNet, DCD_HIDDEN};
    use crate::pairs::{build_grouped_pairs, Domain};
    use crate::tensor::{params_checksum, Parameter};

    const LN4: f64 = 1.3862943611198906;
    const LN2: f64 = 0.6931471805599453;

    fn set_values(p: &mut Parameter<f32>, f: impl Fn(usize) -> f32) {
        for (i, v) in p.value_mut().data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    }

    fn zeroed_dcd(embed_dim: usize) -> DomainClassDiscriminator<f32> {
        let mut d = DomainClassDiscriminator::init(0, embed_dim);
        for p in d.params_mut() {
            set_values(p, |_| 0.0);
        }
        d
    }

    /// identity-ish vector encoder: relu(x I) = x for non-negative inputs
    fn identity_encoder(dim: usize) -> Encoder<f32> {
        let mut net = VectorEmbeddingNet::init(0, dim, dim, dim);
        let eye = |cols: usize| move |i: usize| if i / cols == i % cols { 1.0 } else { 0.0 };
        set_values(&mut net.fc1_w, eye(dim));
        set_values(&mut net.fc1_b, |_| 0.0);
        set_values(&mut net.fc2_w, eye(dim));
        set_values(&mut net.fc2_b, |_| 0.0);
        Encoder::Vector(net)
    }

    fn onehot_dataset(labels: &[u8], feature_of: impl Fn(usize) -> usize, dim: usize, tag: &str) -> VectorDataset {
        let n = labels.len();
        let mut data = vec![0.0f32; n * dim];
        for i in 0..n {
            data[i * dim + feature_of(i)] = 1.0;
        }
        VectorDataset::new(Tensor::new(vec![n, dim], data).unwrap(), labels.to_vec(), tag).unwrap()
    }

    #[test]
    fn dcd_loss_uniform_discriminator_is_ln4() {
        let d = zeroed_dcd(2);
        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::from_fn(vec![3, 2], |i| i as f32));
        let zb = tape.leaf(Tensor::from_fn(vec![3, 2], |i| (i as f32).sin().abs()));
        let bound = d.bind(&mut tape);
        let loss = dcd_loss(&mut tape, &bound, za, zb, &[1, 2, 4]).unwrap();
        assert!((f64::from(tape.value_of(loss).item().unwrap()) - LN4).abs() < 1e-6);
    }

    #[test]
    fn dcd_loss_perfect_discriminator_is_zero() {
        // hidden unit i<4 copies input i; output logit k reads 100*hidden k
        let mut d = zeroed_dcd(2);
        set_values(&mut d.fc1_w, |i| {
            let (row, col) = (i / 64, i % 64);
            if row == col { 1.0 } else { 0.0 }
        });
        set_values(&mut d.fc2_w, |i| {
            let (row, col) = (i / 4, i % 4);
            if row == col && row < 4 { 100.0 } else { 0.0 }
        });
        // pairs whose concatenated input is the one-hot of their group class
        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let zb = tape.leaf(Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let bound = d.bind(&mut tape);
        let loss = dcd_loss(&mut tape, &bound, za, zb, &[1, 2, 3, 4]).unwrap();
        assert!(f64::from(tape.value_of(loss).item().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn dcd_loss_matches_hand_evaluation() {
        // two pairs, embed_dim 1, engineered small weights
        let mut d = zeroed_dcd(1);
        set_values(&mut d.fc1_w, |i| if i < 2 * DCD_HIDDEN { ((i % 3) as f32 - 1.0) * 0.5 } else { 0.0 });
        set_values(&mut d.fc1_b, |i| if i < 4 { 0.1 } else { 0.0 });
        set_values(&mut d.fc2_w, |i| ((i % 5) as f32 - 2.0) * 0.25);

        let za_v = [0.3f32, -0.2];
        let zb_v = [0.7f32, 0.4];
        let groups = [2u8, 3];

        // independent evaluation in f64
        let w1: Vec<f64> = (0..2 * DCD_HIDDEN).map(|i| (((i % 3) as f64) - 1.0) * 0.5).collect();
        let b1: Vec<f64> = (0..DCD_HIDDEN).map(|i| if i < 4 { 0.1 } else { 0.0 }).collect();
        let w2: Vec<f64> = (0..DCD_HIDDEN * 4).map(|i| (((i % 5) as f64) - 2.0) * 0.25).collect();
        let mut expected = 0.0f64;
        for (row, &g) in groups.iter().enumerate() {
            let phi = [f64::from(za_v[row]), f64::from(zb_v[row])];
            let mut hidden = [0.0f64; DCD_HIDDEN];
            for h in 0..DCD_HIDDEN {
                let pre = phi[0] * w1[h] + phi[1] * w1[DCD_HIDDEN + h] + b1[h];
                hidden[h] = pre.max(0.0);
            }
            let mut logits = [0.0f64; 4];
            for k in 0..4 {
                for h in 0..DCD_HIDDEN {
                    logits[k] += hidden[h] * w2[h * 4 + k];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            expected += lse - logits[usize::from(g) - 1];
        }
        expected /= 2.0;

        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::new(vec![2, 1], za_v.to_vec()).unwrap());
        let zb = tape.leaf(Tensor::new(vec![2, 1], zb_v.to_vec()).unwrap());
        let bound = d.bind(&mut tape);
        let loss = dcd_loss(&mut tape, &bound, za, zb, &groups).unwrap();
        let got = f64::from(tape.value_of(loss).item().unwrap());
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn dcd_loss_rejects_bad_group_number() {
        let d = zeroed_dcd(2);
        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::zeros(vec![1, 2]));
        let zb = tape.leaf(Tensor::zeros(vec![1, 2]));
        let bound = d.bind(&mut tape);
        assert!(dcd_loss(&mut tape, &bound, za, zb, &[0]).is_err());
        let bound = d.bind(&mut tape);
        assert!(dcd_loss(&mut tape, &bound, za, zb, &[5]).is_err());
    }

    fn cross_pair(first: u32, second: u32, group: PairGroup) -> PairRecord {
        PairRecord { first_index: first, second_index: second, second_domain: Domain::Target, group }
    }

    #[test]
    fn confusion_loss_uniform_discriminator_is_ln4_per_term() {
        let dim = 2;
        let encoder = identity_encoder(dim);
        let d = zeroed_dcd(dim);
        let source = onehot_dataset(&[0, 1], |i| i % 2, dim, "src");
        let target = onehot_dataset(&[0, 1], |i| i % 2, dim, "tgt");

        let both = [
            cross_pair(0, 0, PairGroup::CrossSame),
            cross_pair(0, 1, PairGroup::CrossDiff),
        ];
        let mut tape = Tape::new();
        let (loss, _) = confusion_loss(&mut tape, &d, &encoder, &both, &source, &target).unwrap();
        let v = f64::from(tape.value_of(loss).item().unwrap());
        assert!((v - 2.0 * LN4).abs() < 1e-6, "two uniform terms: {v}");

        let only_g2 = [cross_pair(0, 0, PairGroup::CrossSame)];
        let mut tape = Tape::new();
        let (loss, _) = confusion_loss(&mut tape, &d, &encoder, &only_g2, &source, &target).unwrap();
        let v = f64::from(tape.value_of(loss).item().unwrap());
        assert!((v - LN4).abs() < 1e-6, "single uniform term: {v}");
    }

    #[test]
    fn confusion_loss_is_zero_when_fully_confused() {
        // discriminator that reports group 1 for same-class pairs and group 3
        // for different-class pairs, with near certainty
        let dim = 2;
        let encoder = identity_encoder(dim);
        let mut d = zeroed_dcd(dim);
        // hidden 0: x0+x2-1 (both class 0); hidden 1: x1+x3-1 (both class 1)
        // hidden 2: x0+x3-1 (0 then 1);    hidden 3: x1+x2-1 (1 then 0)
        set_values(&mut d.fc1_w, |i| {
            let (row, col) = (i / DCD_HIDDEN, i % DCD_HIDDEN);
            match (row, col) {
                (0, 0) | (2, 0) => 1.0,
                (1, 1) | (3, 1) => 1.0,
                (0, 2) | (3, 2) => 1.0,
                (1, 3) | (2, 3) => 1.0,
                _ => 0.0,
            }
        });
        set_values(&mut d.fc1_b, |i| if i < 4 { -1.0 } else { 0.0 });
        set_values(&mut d.fc2_w, |i| {
            let (row, col) = (i / 4, i % 4);
            match (row, col) {
                (0, 0) | (1, 0) => 100.0, // same-class evidence -> group 1
                (2, 2) | (3, 2) => 100.0, // diff-class evidence -> group 3
                _ => 0.0,
            }
        });
        let source = onehot_dataset(&[0, 1], |i| i % 2, dim, "src");
        let target = onehot_dataset(&[0, 1], |i| i % 2, dim, "tgt");
        let pairs = [
            cross_pair(0, 0, PairGroup::CrossSame),
            cross_pair(1, 1, PairGroup::CrossSame),
            cross_pair(0, 1, PairGroup::CrossDiff),
            cross_pair(1, 0, PairGroup::CrossDiff),
        ];
        let mut tape = Tape::new();
        let (loss, _) = confusion_loss(&mut tape, &d, &encoder, &pairs, &source, &target).unwrap();
        let v = f64::from(tape.value_of(loss).item().unwrap());
        assert!(v.abs() < 1e-6, "confused discriminator gives zero loss: {v}");
    }

    #[test]
    fn confusion_loss_rejects_groups_one_and_three() {
        let dim = 2;
        let encoder = identity_encoder(dim);
        let d = zeroed_dcd(dim);
        let source = onehot_dataset(&[0, 0], |i| i % 2, dim, "src");
        let target = onehot_dataset(&[0], |_| 0, dim, "tgt");
        let bad = [PairRecord {
            first_index: 0,
            second_index: 1,
            second_domain: Domain::Source,
            group: PairGroup::SourceSame,
        }];
        let mut tape = Tape::new();
        assert!(confusion_loss(&mut tape, &d, &encoder, &bad, &source, &target).is_err());
        let mut tape = Tape::new();
        assert!(confusion_loss(&mut tape, &d, &encoder, &[], &source, &target).is_err());
    }

    #[test]
    fn uda_zero_initialized_binary_head_gives_two_ln2() {
        let mut dbin = BinaryDomainHead::init(0, 3);
        for p in dbin.params_mut() {
            set_values(p, |_| 0.0);
        }
        let mut tape = Tape::new();
        let zs = tape.leaf(Tensor::from_fn(vec![4, 3], |i| i as f32));
        let zt = tape.leaf(Tensor::from_fn(vec![4, 3], |i| -(i as f32)));
        let bound = dbin.bind(&mut tape);
        let ps = bound.forward(&mut tape, zs).unwrap();
        let pt = bound.forward(&mut tape, zt).unwrap();
        let ce_s = tape.cross_entropy(ps, &[0, 0, 0, 0]).unwrap();
        let ce_t = tape.cross_entropy(pt, &[1, 1, 1, 1]).unwrap();
        let loss = tape.add(ce_s, ce_t).unwrap();
        assert!((f64::from(tape.value_of(loss).item().unwrap()) - 2.0 * LN2).abs() < 1e-6);
    }

    // 20-sample evaluation fixture: prediction is the feature's one-hot class
    fn eval_fixture(preds: &[u8], truths: &[u8]) -> (Encoder<f32>, PredictorHead<f32>, VectorDataset) {
        let dim = 10;
        let encoder = identity_encoder(dim);
        let mut head = PredictorHead::init(0, dim, 10);
        set_values(&mut head.w, |i| if i / 10 == i % 10 { 25.0 } else { 0.0 });
        set_values(&mut head.b, |_| 0.0);
        let ds = onehot_dataset(truths, |i| usize::from(preds[i]), dim, "fixture");
        (encoder, head, ds)
    }

    #[test]
    fn evaluate_matches_hand_confusion_matrix() {
        let truths: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        // rows 0..10 predicted correctly; rows 10.. shifted by one class
        let preds: Vec<u8> = truths
            .iter()
            .enumerate()
            .map(|(i, &t)| if i < 10 { t } else { (t + 1) % 10 })
            .collect();
        let (encoder, head, ds) = eval_fixture(&preds, &truths);
        let eval = evaluate(&encoder, &head, &ds).unwrap();
        assert_eq!(eval.correct, 10);
        assert_eq!(eval.total, 20);
        assert!((eval.accuracy - 0.5).abs() < 1e-12);
        for c in 0..10 {
            assert_eq!(eval.per_class_counts[c], 2);
            assert!((eval.per_class_accuracy[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_perfect_predictions_give_one() {
        let truths: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        let (encoder, head, ds) = eval_fixture(&truths.clone(), &truths);
        let eval = evaluate(&encoder, &head, &ds).unwrap();
        assert_eq!(eval.accuracy, 1.0);
    }

    #[test]
    fn evaluate_uniform_predictor_is_chance_level() {
        let truths: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        let (encoder, mut head, ds) = eval_fixture(&truths.clone(), &truths);
        for p in head.params_mut() {
            set_values(p, |_| 0.0);
        }
        // uniform rows; first-maximum tie break picks class 0
        let eval = evaluate(&encoder, &head, &ds).unwrap();
        assert!((eval.accuracy - 0.1).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let encoder = identity_encoder(4);
        let head = PredictorHead::init(0, 4, 10);
        let ds = VectorDataset::new(Tensor::zeros(vec![0, 4]), vec![], "empty").unwrap();
        assert!(evaluate(&encoder, &head, &ds).is_err());
    }

    fn separable_dataset(n_per_class: usize, classes: usize, tag: &str) -> VectorDataset {
        let dim = classes;
        let n = n_per_class * classes;
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        let mut data = vec![0.05f32; n * dim];
        for (i, &l) in labels.iter().enumerate() {
            data[i * dim + usize::from(l)] = 0.9 + 0.01 * ((i / classes) as f32);
        }
        VectorDataset::new(Tensor::new(vec![n, dim], data).unwrap(), labels, tag).unwrap()
    }

    #[test]
    fn pretrain_rejects_empty_source() {
        let mut bundle: ModelBundle<f32> = init_vector_models(0, 4, 8, 6, 10);
        let empty = VectorDataset::new(Tensor::zeros(vec![0, 4]), vec![], "empty").unwrap();
        let cfg = TrainConfig::default();
        assert!(pretrain_source(
            &mut bundle.encoder,
            &mut bundle.predictor,
            &empty,
            &EvalSets::default(),
            &cfg
        )
        .is_err());
    }

    #[test]
    fn pretrain_loss_decreases_over_first_epochs() {
        let ds = separable_dataset(12, 5, "src");
        let mut bundle: ModelBundle<f32> = init_vector_models(3, 5, 16, 8, 5);
        let cfg = TrainConfig { epochs_pretrain: 3, batch_class: 10, seed: 1, ..Default::default() };
        let metrics = pretrain_source(
            &mut bundle.encoder,
            &mut bundle.predictor,
            &ds,
            &EvalSets::default(),
            &cfg,
        )
        .unwrap();
        let losses: Vec<f64> = metrics.epochs.iter().map(|e| e.loss_class_source.unwrap()).collect();
        assert_eq!(losses.len(), 3);
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
        assert!(metrics.all_finite());
    }

    #[test]
    fn finetune_rejects_empty_target() {
        let mut bundle: ModelBundle<f32> = init_vector_models(0, 4, 8, 6, 10);
        let empty = VectorDataset::new(Tensor::zeros(vec![0, 4]), vec![], "empty").unwrap();
        let cfg = TrainConfig::default();
        assert!(finetune_baseline(
            &mut bundle.encoder,
            &mut bundle.predictor,
            &empty,
            &EvalSets::default(),
            &cfg
        )
        .is_err());
    }

    #[test]
    fn train_dcd_leaves_encoder_and_predictor_untouched() {
        let source = separable_dataset(6, 4, "src");
        let target = separable_dataset(2, 4, "tgt");
        let mut bundle: ModelBundle<f32> = init_vector_models(5, 4, 12, 6, 4);
        let gp = build_grouped_pairs(&source, &target, 3).unwrap();
        let cfg = TrainConfig { epochs_dcd: 2, batch_pairs: 8, seed: 2, ..Default::default() };

        let g_before = params_checksum(&bundle.encoder.params());
        let h_before = params_checksum(&bundle.predictor.params());
        let d_before = params_checksum(&bundle.dcd.params());
        let metrics =
            train_dcd(&mut bundle.dcd, &bundle.encoder, &gp, &source, &target, &cfg).unwrap();
        assert_eq!(params_checksum(&bundle.encoder.params()), g_before);
        assert_eq!(params_checksum(&bundle.predictor.params()), h_before);
        assert_ne!(params_checksum(&bundle.dcd.params()), d_before);
        assert!(metrics.all_finite());
        assert_eq!(metrics.epochs.len(), 2);
        assert!(metrics.last().unwrap().loss_dcd.is_some());
    }

    #[test]
    fn fada_step_total_decomposes_exactly() {
        let source = separable_dataset(6, 4, "src");
        let target = separable_dataset(2, 4, "tgt");
        let mut bundle: ModelBundle<f32> = init_vector_models(5, 4, 12, 6, 4);
        let gp = build_grouped_pairs(&source, &target, 3).unwrap();
        let cfg = TrainConfig { batch_pairs: 8, batch_class: 8, seed: 2, ..Default::default() };
        let stream = PairBatches::new(&gp, 8, 1).unwrap();
        let batch: Vec<PairRecord> = stream.epoch(0).next().unwrap();

        let mut adam_gh = {
            let mut params = bundle.encoder.params();
            params.extend(bundle.predictor.params());
            AdamState::new(cfg.adam(cfg.lr_adv), &params).unwrap()
        };
        let mut adam_d = AdamState::new(cfg.adam(cfg.lr_dcd), &bundle.dcd.params()).unwrap();
        let losses = fada_step(
            &mut bundle,
            &mut adam_gh,
            &mut adam_d,
            &batch,
            &[0, 1, 2, 3],
            &[0, 1],
            &source,
            &target,
            &cfg,
        )
        .unwrap();
        let recomposed = cfg.gamma * losses.confusion + losses.class_source + losses.class_target;
        assert!((losses.total - recomposed).abs() < 1e-9);
        assert!(losses.confusion.is_finite() && losses.dcd.is_finite());
    }

    #[test]
    fn fada_loop_moves_all_three_networks_and_logs_metrics() {
        let source = separable_dataset(6, 4, "src");
        let target = separable_dataset(2, 4, "tgt");
        let mut bundle: ModelBundle<f32> = init_vector_models(5, 4, 12, 6, 4);
        let gp = build_grouped_pairs(&source, &target, 3).unwrap();
        let cfg = TrainConfig { epochs_adv: 2, batch_pairs: 8, batch_class: 8, seed: 2, ..Default::default() };

        let g_before = params_checksum(&bundle.encoder.params());
        let d_before = params_checksum(&bundle.dcd.params());
        let eval = EvalSets { source_val: Some(&source), target_val: None };
        let metrics = fada_loop(&mut bundle, &source, &target, &gp, &eval, &cfg).unwrap();
        assert_ne!(params_checksum(&bundle.encoder.params()), g_before);
        assert_ne!(params_checksum(&bundle.dcd.params()), d_before);
        assert_eq!(metrics.epochs.len(), 2);
        let last = metrics.last().unwrap();
        assert!(last.loss_confusion.is_some());
        assert!(last.loss_total.is_some());
        assert!(last.dcd_holdout_acc.is_some());
        assert!(last.acc_source_val.is_some());
        assert!(metrics.all_finite());
        // reported total decomposes into its parts
        for e in &metrics.epochs {
            let recomposed = cfg.gamma * e.loss_confusion.unwrap()
                + e.loss_class_source.unwrap()
                + e.loss_class_target.unwrap();
            assert!((e.loss_total.unwrap() - recomposed).abs() < 1e-9);
        }
    }

    #[test]
    fn fada_loop_rejects_negative_gamma_and_empty_target() {
        let source = separable_dataset(6, 4, "src");
        let target = separable_dataset(2, 4, "tgt");
        let mut bundle: ModelBundle<f32> = init_vector_models(5, 4, 12, 6, 4);
        let gp = build_grouped_pairs(&source, &target, 3).unwrap();
        let bad = TrainConfig { gamma: -0.1, ..Default::default() };
        assert!(
            fada_loop(&mut bundle, &source, &target, &gp, &EvalSets::default(), &bad).is_err()
        );
        let empty = VectorDataset::new(Tensor::zeros(vec![0, 4]), vec![], "empty").unwrap();
        let cfg = TrainConfig::default();
        assert!(fada_loop(&mut bundle, &source, &empty, &gp, &EvalSets::default(), &cfg).is_err());
    }

    #[test]
    fn config_validation_reports_all_problems_at_once() {
        let cfg = TrainConfig {
            gamma: -1.0,
            lr_pretrain: 0.0,
            batch_pairs: 6,
            n_shot: 0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("gamma"));
        assert!(err.contains("lr_pretrain"));
        assert!(err.contains("batch_pairs"));
        assert!(err.contains("n_shot"));
    }
}
