//! Alternating training: discriminator pretraining on pairs, then 1:1
//! discriminator and generator steps with pseudo-labels refreshed from a
//! fresh pool every step, and per-epoch evaluation.

mod config;

use std::fmt::Write as _;

use rand::Rng as _;

pub use crate::models::{load_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;

use crate::autodiff::{adam_step, AdamState, Graph, NodeId, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::losses::{discriminator_objective, gan_utility, total_loss, LossBatch, LossTerms, VariantFlags};
use crate::metrics::{caption_words, corpus_bleu, pseudo_accuracy, retrieval_recall};
use crate::models::{DecodeConfig, ModelBundle};
use crate::pseudo::{batch_assign, subsample_pool, CountingScorer, ModelScorer, PseudoAssignment, SearchPool};
use crate::rng::{Rng, SeedSplitter, Stream};
use crate::toyworld::{caption_text, concept_of, make_splits, DatasetSplits, Example};

pub const CSV_HEADER: &str =
    "epoch,loss_cap,loss_U,loss_reg,loss_triplet,loss_concept,bleu1,bleu2,bleu3,bleu4,recall_at_1,recall_at_5,pseudo_acc,disc_evals";

/// Unweighted loss terms of one step. For the cycle baseline `u` holds the
/// adversarial term and `reg` the cycle term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub cap: f64,
    pub u: f64,
    pub reg: f64,
    pub triplet: f64,
    pub concept: f64,
    pub total: f64,
    /// Pair-scorer evaluations spent on pseudo-labels, per direction.
    pub disc_evals: [u64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_cap: f64,
    pub loss_u: f64,
    pub loss_reg: f64,
    pub loss_triplet: f64,
    pub loss_concept: f64,
    pub bleu: [f64; 4],
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub pseudo_acc: f64,
    pub disc_evals: u64,
}

impl EpochRow {
    pub fn values(&self) -> [f64; 12] {
        [
            self.loss_cap,
            self.loss_u,
            self.loss_reg,
            self.loss_triplet,
            self.loss_concept,
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.recall_at_1,
            self.recall_at_5,
            self.pseudo_acc,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = write!(s, "{}", r.epoch);
            for v in r.values() {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", r.disc_evals);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Evaluation on the held-out test pairs and an unpaired probe.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub pseudo_acc: f64,
    /// Reference and generated text for the first test examples.
    pub samples: Vec<(String, String)>,
}

fn stack(examples: &[Example]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = examples.iter().map(|e| e.features.clone()).collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(&[0, 0]));
    }
    Tensor::from_rows(&rows)
}

struct TrainData {
    splits: DatasetSplits,
    paired_x: Tensor,
    unpaired_x: Tensor,
    test_x: Tensor,
}

impl TrainData {
    fn new(splits: DatasetSplits) -> Result<Self> {
        for (set, name) in [(&splits.paired, "paired"), (&splits.unpaired_images, "unpaired images"), (&splits.unpaired_captions, "unpaired captions"), (&splits.test, "test")] {
            if set.is_empty() {
                return Err(Error::EmptyBatch(name));
            }
        }
        Ok(Self {
            paired_x: stack(&splits.paired)?,
            unpaired_x: stack(&splits.unpaired_images)?,
            test_x: stack(&splits.test)?,
            splits,
        })
    }
}

fn sample_ids(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

fn tokens<'a>(set: &'a [Example], ids: &[usize]) -> Vec<&'a [usize]> {
    ids.iter().map(|&i| set[i].caption.tokens()).collect()
}

/// Pseudo-labels for the batch anchors against one fresh pool per
/// direction, with ids mapped back to the unpaired sets.
struct Retrieval {
    for_images: Vec<PseudoAssignment>,
    for_captions: Vec<PseudoAssignment>,
    evaluations: [u64; 2],
}

fn retrieve(
    model: &ModelBundle,
    data: &TrainData,
    image_ids: &[usize],
    caption_ids: &[usize],
    pool_fraction: f64,
    rng: &mut Rng,
) -> Result<Retrieval> {
    let s = &data.splits;
    let caption_pool = subsample_pool(s.unpaired_captions.len(), pool_fraction, rng)?;
    let image_pool = subsample_pool(s.unpaired_images.len(), pool_fraction, rng)?;

    // Codes for anchors and pool candidates, encoded once.
    let mut img_rows = image_ids.to_vec();
    img_rows.extend(&image_pool.ids);
    let (zx, _) = model.infer_images(&data.unpaired_x.select_rows(&img_rows))?;
    let mut cap_rows = caption_ids.to_vec();
    cap_rows.extend(&caption_pool.ids);
    let zy = model.infer_captions(&tokens(&s.unpaired_captions, &cap_rows))?;

    let (ni, nc) = (image_ids.len(), caption_ids.len());
    let local = |pool: &SearchPool, offset: usize| SearchPool { ids: (offset..offset + pool.len()).collect(), fraction: pool.fraction };
    let scorer = CountingScorer::new(ModelScorer::new(model, zx, zy));
    let anchors_i: Vec<usize> = (0..ni).collect();
    let anchors_c: Vec<usize> = (0..nc).collect();
    let out = batch_assign(&anchors_i, &anchors_c, &local(&caption_pool, nc), &local(&image_pool, ni), &scorer)?;
    let remap = |a: &PseudoAssignment, anchors: &[usize], pool: &SearchPool, offset: usize| PseudoAssignment {
        anchor: anchors[a.anchor],
        matched: pool.ids[a.matched - offset],
        ..*a
    };
    Ok(Retrieval {
        for_images: out.for_images.iter().map(|a| remap(a, image_ids, &caption_pool, nc)).collect(),
        for_captions: out.for_captions.iter().map(|a| remap(a, caption_ids, &image_pool, ni)).collect(),
        evaluations: out.evaluations,
    })
}

fn scalar(g: &Graph, n: Option<NodeId>) -> f64 {
    n.map_or(0.0, |n| g.scalar(n))
}

fn step_losses(g: &Graph, t: &LossTerms) -> StepLosses {
    let mut s = StepLosses { cap: scalar(g, t.cap), triplet: scalar(g, t.triplet), concept: scalar(g, t.concept), total: g.scalar(t.total), ..Default::default() };
    if let Some(gan) = t.gan {
        s.u = g.scalar(gan.u);
        s.reg = g.scalar(gan.reg);
    }
    if let Some(c) = t.cycle {
        s.u = g.scalar(c.adversarial);
        s.reg = g.scalar(c.cycle);
    }
    s
}

/// Clipped gradient step on `root` over the parameters owned by `state`.
fn update(model: &mut ModelBundle, g: &Graph, root: NodeId, state: &mut AdamState, clip: f64, what: &str) -> Result<()> {
    let value = g.scalar(root);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{what} objective is {value}")));
    }
    let mut grads = g.backward(root)?.param_table(&model.store);
    let ids = state.ids().to_vec();
    let norm = grads.norm(&ids);
    if !norm.is_finite() {
        let bad: Vec<&str> = ids.iter().filter(|&&id| !grads.get(id).data().iter().all(|v| v.is_finite())).map(|&id| model.store.name(id)).collect();
        return Err(Error::NanGradient(format!("{what} gradient in {}", bad.join(", "))));
    }
    grads.clip_norm(&ids, clip);
    adam_step(&mut model.store, &grads, state)
}

/// Parameter fingerprints before a step, after its discriminator update and
/// after its generator update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlternationTrace {
    pub generator: [u64; 3],
    pub discriminator: [u64; 3],
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: ModelBundle,
    flags: VariantFlags,
    data: TrainData,
    gen_state: AdamState,
    disc_state: Option<AdamState>,
    splitter: SeedSplitter,
    order: Rng,
    pools: Rng,
    negatives: Rng,
    steps: u64,
}

impl Trainer {
    /// Generates the dataset and initializes the models from `config.seed`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let splitter = SeedSplitter::new(config.seed);
        let splits = make_splits(&config.data, &mut splitter.stream(Stream::Data))?;
        Self::with_splits(config, splits)
    }

    pub fn with_splits(config: ExperimentConfig, splits: DatasetSplits) -> Result<Self> {
        config.validate()?;
        let flags = config.flags();
        let splitter = SeedSplitter::new(config.seed);
        let model = ModelBundle::new(config.dims, flags.cyclegan, &mut splitter.stream(Stream::Init))?;
        let gen_state = AdamState::new(&model.store, model.generator_ids(), config.adam)?;
        let disc_ids = Self::disc_ids(&model, &flags);
        let disc_state = if disc_ids.is_empty() { None } else { Some(AdamState::new(&model.store, disc_ids, config.adam)?) };
        Ok(Self {
            flags,
            data: TrainData::new(splits)?,
            gen_state,
            disc_state,
            order: splitter.stream(Stream::Order),
            pools: splitter.stream(Stream::Pools),
            negatives: splitter.stream(Stream::Negatives),
            splitter,
            model,
            config,
            steps: 0,
        })
    }

    fn disc_ids(model: &ModelBundle, flags: &VariantFlags) -> Vec<ParamId> {
        if flags.gan {
            model.d.param_ids()
        } else if flags.cyclegan {
            [&model.d_x, &model.d_y].iter().filter_map(|d| d.as_ref()).flat_map(|d| d.param_ids()).collect()
        } else {
            Vec::new()
        }
    }

    pub fn flags(&self) -> VariantFlags {
        self.flags
    }

    pub fn splits(&self) -> &DatasetSplits {
        &self.data.splits
    }

    /// Adversarial game on paired data only: the fakes are synthesized
    /// from the paired codes. Returns `U` before each discriminator step.
    /// Variants without the pair discriminator skip this.
    pub fn pretrain_discriminator(&mut self, steps: usize) -> Result<Vec<f64>> {
        if !self.flags.gan {
            return Ok(Vec::new());
        }
        let b = self.config.batch_size;
        let w = self.config.weights;
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let ids = sample_ids(&mut self.order, self.data.splits.paired.len(), b);
            let x = self.data.paired_x.select_rows(&ids);
            let y = tokens(&self.data.splits.paired, &ids);

            let mut g = Graph::new();
            let batch = LossBatch { paired_x: Some(&x), paired_y: y.clone(), unpaired_x: Some(&x), unpaired_y: y.clone(), ..Default::default() };
            let d_obj = discriminator_objective(&self.model, &mut g, &batch, &w, &self.flags)?;
            trace.push(-g.scalar(d_obj));
            let state = self.disc_state.as_mut().expect("gan variants own a discriminator");
            update(&mut self.model, &g, d_obj, state, self.config.clip_norm, "discriminator")?;

            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let zx = self.model.encode_images(&mut g, xn)?.z;
            let zy = self.model.encode_captions(&mut g, &y)?;
            let t = gan_utility(&self.model, &mut g, (zx, zy), zx, zy, &w)?;
            let root = g.add(t.u, t.reg)?;
            update(&mut self.model, &g, root, &mut self.gen_state, self.config.clip_norm, "generator")?;
        }
        Ok(trace)
    }

    /// One discriminator step (when the variant has one) then one
    /// generator step on the total loss.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        self.step(None)
    }

    /// [`Trainer::train_step`], also hashing both parameter groups before
    /// the step, between its two updates, and after it.
    pub fn train_step_traced(&mut self) -> Result<(StepLosses, AlternationTrace)> {
        let mut trace = AlternationTrace::default();
        let losses = self.step(Some(&mut trace))?;
        Ok((losses, trace))
    }

    fn record(&self, trace: &mut Option<&mut AlternationTrace>, at: usize) {
        if let Some(t) = trace.as_deref_mut() {
            let disc = Self::disc_ids(&self.model, &self.flags);
            t.generator[at] = self.model.store.fingerprint(&self.model.generator_ids());
            t.discriminator[at] = self.model.store.fingerprint(&disc);
        }
    }

    fn step(&mut self, mut trace: Option<&mut AlternationTrace>) -> Result<StepLosses> {
        self.record(&mut trace, 0);
        let b = self.config.batch_size;
        let w = self.config.weights;
        let flags = self.flags;
        let s = &self.data.splits;
        let pi = sample_ids(&mut self.order, s.paired.len(), b);
        let ui = sample_ids(&mut self.order, s.unpaired_images.len(), b);
        let uc = sample_ids(&mut self.order, s.unpaired_captions.len(), b);
        let px = self.data.paired_x.select_rows(&pi);
        let ux = self.data.unpaired_x.select_rows(&ui);
        let mut batch = LossBatch {
            paired_x: Some(&px),
            paired_y: tokens(&s.paired, &pi),
            unpaired_x: Some(&ux),
            unpaired_y: tokens(&s.unpaired_captions, &uc),
            ..Default::default()
        };

        if let Some(state) = self.disc_state.as_mut() {
            let mut g = Graph::new();
            let d_obj = discriminator_objective(&self.model, &mut g, &batch, &w, &flags)?;
            update(&mut self.model, &g, d_obj, state, self.config.clip_norm, "discriminator")?;
        }
        self.record(&mut trace, 1);

        let mut losses = StepLosses::default();
        let pseudo_x;
        if flags.pseudo {
            let r = retrieve(&self.model, &self.data, &ui, &uc, self.config.pool_fraction, &mut self.pools)?;
            batch.pseudo_y = r.for_images.iter().map(|a| s.unpaired_captions[a.matched].caption.tokens()).collect();
            batch.alpha_x = r.for_images.iter().map(|a| a.confidence).collect();
            let rows: Vec<usize> = r.for_captions.iter().map(|a| a.matched).collect();
            pseudo_x = self.data.unpaired_x.select_rows(&rows);
            batch.pseudo_x = Some(&pseudo_x);
            batch.alpha_y = r.for_captions.iter().map(|a| a.confidence).collect();
            losses.disc_evals = r.evaluations;
        }

        let neg_x;
        if flags.triplet {
            let ni = sample_ids(&mut self.negatives, s.unpaired_images.len(), b);
            let nc = sample_ids(&mut self.negatives, s.unpaired_captions.len(), b);
            neg_x = self.data.unpaired_x.select_rows(&ni);
            batch.neg_x = Some(&neg_x);
            batch.neg_y = tokens(&s.unpaired_captions, &nc);
        }

        let concepts;
        if flags.concept {
            let rows: Vec<Vec<f64>> =
                pi.iter().map(|&i| concept_of(&s.paired[i].scene)).chain(ui.iter().map(|&i| concept_of(&s.unpaired_images[i].scene))).collect();
            concepts = Tensor::from_rows(&rows)?;
            batch.concepts = Some(&concepts);
        }

        let mut g = Graph::new();
        let terms = total_loss(&self.model, &mut g, &batch, &w, &flags)?;
        let step = step_losses(&g, &terms);
        if !step.total.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {}: {step:?}", self.steps)));
        }
        update(&mut self.model, &g, terms.total, &mut self.gen_state, self.config.clip_norm, "generator")?;
        self.record(&mut trace, 2);
        self.steps += 1;
        Ok(StepLosses { disc_evals: losses.disc_evals, ..step })
    }

    /// Test-set captioning and retrieval, and pseudo-label accuracy of the
    /// pair discriminator on an unpaired probe. Uses its own random stream
    /// per `epoch`, so evaluation never perturbs training.
    pub fn evaluate(&self, epoch: usize) -> Result<EvalReport> {
        let mut rng = self.splitter.named(&format!("eval.{epoch}"));
        let s = &self.data.splits;
        let (zx, _) = self.model.infer_images(&self.data.test_x)?;
        let max_len = self.config.dims.max_decode;
        let cfg = if self.config.beam_width > 1 { DecodeConfig::beam(self.config.beam_width, max_len) } else { DecodeConfig::greedy(max_len) };
        let mut generated = Vec::with_capacity(s.test.len());
        for i in 0..s.test.len() {
            generated.push(self.model.decode(zx.row_slice(i), &cfg)?.tokens);
        }
        let pairs: Vec<(&[usize], Vec<&[usize]>)> =
            generated.iter().zip(&s.test).map(|(h, e)| (caption_words(h), vec![caption_words(e.caption.tokens())])).collect();
        let bleu = corpus_bleu(&pairs, 4)?.bleu;
        let samples = generated.iter().zip(&s.test).take(10).map(|(h, e)| (caption_text(e.caption.tokens()), caption_text(h))).collect();

        let zy = self.model.infer_captions(&tokens(&s.test, &(0..s.test.len()).collect::<Vec<_>>()))?;
        let scorer = ModelScorer::new(&self.model, zx, zy);
        let pool = self.config.retrieval_pool.min(s.test.len());
        let ks: Vec<usize> = [1, 5].into_iter().map(|k| k.min(pool)).collect();
        let recall = retrieval_recall(&scorer, s.test.len(), pool, &ks, &mut rng)?;

        let k = self.config.probe_count;
        let probe_i: Vec<usize> = (0..k.min(s.unpaired_images.len())).collect();
        let probe_c: Vec<usize> = (0..k.min(s.unpaired_captions.len())).collect();
        let r = retrieve(&self.model, &self.data, &probe_i, &probe_c, self.config.pool_fraction, &mut rng)?;
        let images: Vec<_> = s.unpaired_images.iter().map(|e| e.scene.clone()).collect();
        let captions: Vec<_> = s.unpaired_captions.iter().map(|e| e.caption.clone()).collect();
        let all: Vec<PseudoAssignment> = r.for_images.into_iter().chain(r.for_captions).collect();
        let pseudo_acc = pseudo_accuracy(&all, &images, &captions)?;

        Ok(EvalReport { bleu, recall_at_1: recall[0], recall_at_5: recall[1], pseudo_acc, samples })
    }

    /// Pretraining, then the epoch loop with evaluation after each epoch.
    pub fn run(mut self) -> Result<RunOutput> {
        let pretrain_trace = self.pretrain_discriminator(self.config.pretrain_steps)?;
        let mut log = MetricsLog::default();
        let mut samples = Vec::new();
        let n = self.config.steps_per_epoch as f64;
        for epoch in 1..=self.config.epochs {
            let mut sum = StepLosses::default();
            let mut evals = 0u64;
            for _ in 0..self.config.steps_per_epoch {
                let l = self.train_step()?;
                sum.cap += l.cap;
                sum.u += l.u;
                sum.reg += l.reg;
                sum.triplet += l.triplet;
                sum.concept += l.concept;
                evals += l.disc_evals[0] + l.disc_evals[1];
            }
            let e = self.evaluate(epoch)?;
            log.rows.push(EpochRow {
                epoch,
                loss_cap: sum.cap / n,
                loss_u: sum.u / n,
                loss_reg: sum.reg / n,
                loss_triplet: sum.triplet / n,
                loss_concept: sum.concept / n,
                bleu: e.bleu,
                recall_at_1: e.recall_at_1,
                recall_at_5: e.recall_at_5,
                pseudo_acc: e.pseudo_acc,
                disc_evals: evals,
            });
            samples = e.samples;
        }
        Ok(RunOutput { log, model: self.model, samples, pretrain_trace })
    }
}

pub struct RunOutput {
    pub log: MetricsLog,
    pub model: ModelBundle,
    /// Reference and generated captions for the first test examples after
    /// the last epoch.
    pub samples: Vec<(String, String)>,
    pub pretrain_trace: Vec<f64>,
}

/// Dataset generation, pretraining, training and per-epoch evaluation,
/// all determined by `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    Trainer::new(config.clone())?.run()
}
