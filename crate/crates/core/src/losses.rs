//! Every training objective as a node on the tape: supervised and
//! pseudo-labeled cross entropy, the pair-discriminator utility with its
//! regression term, the triplet and concept losses, their weighted total,
//! and the cycle-consistency baseline.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lambda_reg: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_x: 0.1, lambda_y: 0.1, lambda_reg: 1.0, lambda_1: 0.1, lambda_2: 0.1, lambda_3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_x", self.lambda_x),
            ("lambda_y", self.lambda_y),
            ("lambda_reg", self.lambda_reg),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The ablation ladder plus the cycle baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    PairedOnly,
    Ver1,
    Ver2,
    Final,
    FinalConcept,
    CycleGan,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::PairedOnly, Variant::Ver1, Variant::Ver2, Variant::Final, Variant::FinalConcept, Variant::CycleGan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PairedOnly => "paired-only",
            Variant::Ver1 => "ver1",
            Variant::Ver2 => "ver2",
            Variant::Final => "final",
            Variant::FinalConcept => "final-concept",
            Variant::CycleGan => "cyclegan",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let none = VariantFlags::default();
        let ver1 = VariantFlags { gan: true, ..none };
        let ver2 = VariantFlags { pseudo: true, triplet: true, ..ver1 };
        let fin = VariantFlags { confidence: true, ..ver2 };
        match self {
            Variant::PairedOnly => none,
            Variant::Ver1 => ver1,
            Variant::Ver2 => ver2,
            Variant::Final => fin,
            Variant::FinalConcept => VariantFlags { concept: true, ..fin },
            Variant::CycleGan => VariantFlags { cyclegan: true, ..none },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Which loss terms are active. `paired_ce` is on for every named variant;
/// turning it off with `cyclegan` gives the purely unpaired cycle setup,
/// which is known not to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    pub gan: bool,
    pub pseudo: bool,
    pub confidence: bool,
    pub triplet: bool,
    pub concept: bool,
    pub cyclegan: bool,
    pub paired_ce: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self { gan: false, pseudo: false, confidence: false, triplet: false, concept: false, cyclegan: false, paired_ce: true }
    }
}

impl VariantFlags {
    pub fn validate(&self) -> Result<()> {
        if self.confidence && !self.pseudo {
            return Err(Error::InconsistentFlags("confidence weighting needs pseudo-labels".into()));
        }
        if self.pseudo && !self.gan {
            return Err(Error::InconsistentFlags("pseudo-labels are retrieved by the pair discriminator".into()));
        }
        if self.cyclegan && (self.gan || self.pseudo || self.triplet) {
            return Err(Error::InconsistentFlags("the cycle baseline replaces the pair discriminator".into()));
        }
        Ok(())
    }

    /// Whether a discriminator step runs at all.
    pub fn adversarial(&self) -> bool {
        self.gan || self.cyclegan
    }

    /// Active term names, for lattice checks.
    pub fn active_terms(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.paired_ce {
            v.push("cap");
        }
        let named = [
            ("gan", self.gan),
            ("pseudo", self.pseudo),
            ("confidence", self.confidence),
            ("triplet", self.triplet),
            ("concept", self.concept),
            ("cycle", self.cyclegan),
        ];
        v.extend(named.iter().filter(|(_, on)| *on).map(|(n, _)| *n));
        v
    }
}

/// Mean over time steps of per-token cross entropy; `logits` is
/// `[steps, vocab]`.
pub fn ce_loss(g: &mut Graph, logits: NodeId, target: &[usize]) -> Result<NodeId> {
    let steps = g.value(logits).rows();
    if steps != target.len() {
        return Err(Error::ShapeMismatch { op: "ce_loss", lhs: g.value(logits).shape().to_vec(), rhs: vec![target.len()] });
    }
    let ce = g.softmax_cross_entropy(logits, target)?;
    g.mean(ce)
}

/// Supervised captioning loss on pairs: batch mean of each sequence's
/// per-token cross entropy under teacher forcing.
pub fn supervised_ce(m: &ModelBundle, g: &mut Graph, zx: NodeId, captions: &[&[usize]]) -> Result<NodeId> {
    let nll = m.decode_teacher(g, zx, captions)?;
    g.mean(nll.mean)
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("confidence {a} outside [0, 1]")));
    }
    Ok(())
}

fn weighted_mean(g: &mut Graph, per_seq: NodeId, alpha: &[f64]) -> Result<NodeId> {
    if g.value(per_seq).rows() != alpha.len() {
        return Err(Error::ShapeMismatch { op: "pseudo_ce_loss", lhs: g.value(per_seq).shape().to_vec(), rhs: vec![alpha.len()] });
    }
    let a = g.constant(Tensor::column(alpha.to_vec()));
    let w = g.mul_col(per_seq, a)?;
    g.mean(w)
}

/// `lambda_x * mean(alpha_x * CE_x) + lambda_y * mean(alpha_y * CE_y)`.
///
/// `ce_x[i]` is the cross entropy of unpaired image i's pseudo-caption,
/// `ce_y[j]` that of unpaired caption j decoded from its pseudo-image;
/// both are `[n, 1]` per-sequence means. Either side may be absent.
pub fn pseudo_ce_loss(
    g: &mut Graph,
    ce_x: Option<(NodeId, &[f64])>,
    ce_y: Option<(NodeId, &[f64])>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut parts = Vec::new();
    for (side, lambda) in [(ce_x, w.lambda_x), (ce_y, w.lambda_y)] {
        if let Some((ce, alpha)) = side {
            check_alpha(alpha)?;
            let m = weighted_mean(g, ce, alpha)?;
            parts.push(g.scale(m, lambda));
        }
    }
    sum_nodes(g, &parts)
}

fn sum_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut it = parts.iter();
    let Some(&first) = it.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &p in it {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Pair-discriminator utility and regression terms.
#[derive(Debug, Clone, Copy)]
pub struct GanTerms {
    /// `real + fake_x + fake_y`.
    pub u: NodeId,
    /// `mean log D(z^x, z^y)` on pairs, with encoders behind a stop-gradient.
    pub real: NodeId,
    /// `1/2 mean log(1 - D(z^x, T_vc(z^x)))` on unpaired images.
    pub fake_x: NodeId,
    /// `1/2 mean log(1 - D(T_cv(z^y), z^y))` on unpaired captions.
    pub fake_y: NodeId,
    /// `lambda_reg * mean(|T_vc(z^x) - z^y|^2 + |z^x - T_cv(z^y)|^2)` on pairs.
    pub reg: NodeId,
}

fn nonempty(g: &Graph, n: NodeId, what: &'static str) -> Result<()> {
    if g.value(n).rows() == 0 {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

pub fn gan_utility(
    m: &ModelBundle,
    g: &mut Graph,
    paired: (NodeId, NodeId),
    zx_u: NodeId,
    zy_u: NodeId,
    w: &LossWeights,
) -> Result<GanTerms> {
    let (zx_p, zy_p) = paired;
    nonempty(g, zx_p, "paired")?;
    nonempty(g, zx_u, "unpaired images")?;
    nonempty(g, zy_u, "unpaired captions")?;

    // The real-pair term trains D only.
    let sx = g.stop_gradient(zx_p);
    let sy = g.stop_gradient(zy_p);
    let l = m.discriminator_logits(g, sx, sy)?;
    let log_d = g.log_sigmoid(l);
    let real = g.mean(log_d)?;

    let ty = m.transform_vc(g, zx_u)?;
    let l = m.discriminator_logits(g, zx_u, ty)?;
    let neg = g.scale(l, -1.0);
    let log_1md = g.log_sigmoid(neg);
    let mx = g.mean(log_1md)?;
    let fake_x = g.scale(mx, 0.5);

    let tx = m.transform_cv(g, zy_u)?;
    let l = m.discriminator_logits(g, tx, zy_u)?;
    let neg = g.scale(l, -1.0);
    let log_1md = g.log_sigmoid(neg);
    let my = g.mean(log_1md)?;
    let fake_y = g.scale(my, 0.5);

    let u = sum_nodes(g, &[real, fake_x, fake_y])?;

    let n = g.value(zx_p).rows() as f64;
    let a = m.transform_vc(g, zx_p)?;
    let da = g.sub(a, zy_p)?;
    let b = m.transform_cv(g, zy_p)?;
    let db = g.sub(zx_p, b)?;
    let na = g.squared_norm(da);
    let nb = g.squared_norm(db);
    let s = g.add(na, nb)?;
    let reg = g.scale(s, w.lambda_reg / n);
    Ok(GanTerms { u, real, fake_x, fake_y, reg })
}

/// Batch mean of `2 nll(y_p|x_p) - nll(y_p|x_u) - nll(y_u|x_p)` where nll
/// is the negative teacher-forced sequence log-likelihood: the two
/// log-ratio penalties with one random negative image and caption per pair.
pub fn triplet_loss(
    m: &ModelBundle,
    g: &mut Graph,
    zx_p: NodeId,
    y_p: &[&[usize]],
    zx_neg: NodeId,
    y_neg: &[&[usize]],
) -> Result<NodeId> {
    check_negatives(g, y_p, zx_neg, y_neg)?;
    let pos = m.decode_teacher(g, zx_p, y_p)?.sum;
    triplet_with_positive(m, g, pos, zx_p, y_p, zx_neg, y_neg)
}

fn check_negatives(g: &Graph, y_p: &[&[usize]], zx_neg: NodeId, y_neg: &[&[usize]]) -> Result<()> {
    if y_p.len() != y_neg.len() || g.value(zx_neg).rows() != y_p.len() {
        return Err(Error::InvalidArgument("triplet needs one negative image and caption per pair".into()));
    }
    Ok(())
}

/// Triplet loss reusing the positive pairs' summed NLL.
fn triplet_with_positive(
    m: &ModelBundle,
    g: &mut Graph,
    pos: NodeId,
    zx_p: NodeId,
    y_p: &[&[usize]],
    zx_neg: NodeId,
    y_neg: &[&[usize]],
) -> Result<NodeId> {
    check_negatives(g, y_p, zx_neg, y_neg)?;
    let neg_img = m.decode_teacher(g, zx_neg, y_p)?.sum;
    let neg_cap = m.decode_teacher(g, zx_p, y_neg)?.sum;
    let twice = g.scale(pos, 2.0);
    let a = g.sub(twice, neg_img)?;
    let b = g.sub(a, neg_cap)?;
    g.mean(b)
}

/// Mean over the batch of `|v_hat - v|^2`.
pub fn concept_loss(g: &mut Graph, predicted: NodeId, concepts: &Tensor) -> Result<NodeId> {
    if g.value(predicted).shape() != concepts.shape() {
        return Err(Error::ShapeMismatch {
            op: "concept_loss",
            lhs: g.value(predicted).shape().to_vec(),
            rhs: concepts.shape().to_vec(),
        });
    }
    let n = concepts.rows() as f64;
    let c = g.constant(concepts.clone());
    let d = g.sub(predicted, c)?;
    let s = g.squared_norm(d);
    Ok(g.scale(s, 1.0 / n))
}

/// Cycle baseline terms on unpaired batches.
#[derive(Debug, Clone, Copy)]
pub struct CycleTerms {
    /// Round-trip L2 distance (not squared), batch mean per modality.
    pub cycle: NodeId,
    /// `mean[log D_x(F x) + log(1 - D_x(T_vc(F x)))]` plus the caption-side
    /// counterpart with D_y and T_cv.
    pub adversarial: NodeId,
}

pub fn cyclegan_loss(m: &ModelBundle, g: &mut Graph, zx: NodeId, zy: NodeId) -> Result<CycleTerms> {
    nonempty(g, zx, "unpaired images")?;
    nonempty(g, zy, "unpaired captions")?;
    let mut adv = Vec::new();
    let mut cyc = Vec::new();
    for (z, image_side) in [(zx, true), (zy, false)] {
        let (there, back) = if image_side {
            let t = m.transform_vc(g, z)?;
            (t, m.transform_cv(g, t)?)
        } else {
            let t = m.transform_cv(g, z)?;
            (t, m.transform_vc(g, t)?)
        };
        let diff = g.sub(back, z)?;
        let norms = g.row_norm(diff);
        cyc.push(g.mean(norms)?);

        let real = m.modality_logits(g, z, image_side)?;
        let fake = m.modality_logits(g, there, image_side)?;
        let lr = g.log_sigmoid(real);
        let nf = g.scale(fake, -1.0);
        let lf = g.log_sigmoid(nf);
        let both = g.add(lr, lf)?;
        adv.push(g.mean(both)?);
    }
    Ok(CycleTerms { cycle: sum_nodes(g, &cyc)?, adversarial: sum_nodes(g, &adv)? })
}

/// Raw inputs for one generator step. Optional parts are required only by
/// the flags that use them.
#[derive(Debug, Clone, Default)]
pub struct LossBatch<'a> {
    pub paired_x: Option<&'a Tensor>,
    pub paired_y: Vec<&'a [usize]>,
    pub unpaired_x: Option<&'a Tensor>,
    pub unpaired_y: Vec<&'a [usize]>,
    /// Retrieved caption for each unpaired image, with its confidence.
    pub pseudo_y: Vec<&'a [usize]>,
    pub alpha_x: Vec<f64>,
    /// Features of the retrieved image for each unpaired caption.
    pub pseudo_x: Option<&'a Tensor>,
    pub alpha_y: Vec<f64>,
    /// One random unpaired image and caption per pair.
    pub neg_x: Option<&'a Tensor>,
    pub neg_y: Vec<&'a [usize]>,
    /// Concept targets for `paired_x` then `unpaired_x`, stacked.
    pub concepts: Option<&'a Tensor>,
}

fn need<T>(v: Option<T>, what: &'static str) -> Result<T> {
    v.ok_or(Error::EmptyBatch(what))
}

/// Weighted terms of one generator objective. Absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cap: Option<NodeId>,
    pub pseudo: Option<NodeId>,
    pub gan: Option<GanTerms>,
    pub triplet: Option<NodeId>,
    pub concept: Option<NodeId>,
    pub cycle: Option<CycleTerms>,
    /// The scalar the generators minimize.
    pub total: NodeId,
}

/// `L_cap + lambda_1 (U + L_reg) + lambda_2 L_triplet + lambda_3 L_concept`
/// with the terms selected by `flags`; `L_cap` is the supervised loss plus
/// the pseudo-labeled terms. The cycle baseline instead adds its cycle and
/// adversarial terms at unit weight. Terms are reported unweighted.
pub fn total_loss(m: &ModelBundle, g: &mut Graph, b: &LossBatch, w: &LossWeights, flags: &VariantFlags) -> Result<LossTerms> {
    flags.validate()?;
    w.validate()?;
    let mut parts = Vec::new();
    let mut out = LossTerms { cap: None, pseudo: None, gan: None, triplet: None, concept: None, cycle: None, total: NodeId(0) };

    let needs_paired = flags.paired_ce || flags.gan || flags.triplet || flags.concept;
    let paired = if needs_paired {
        let x = g.constant(need(b.paired_x, "paired")?.clone());
        Some(m.encode_images(g, x)?)
    } else {
        None
    };
    let needs_unpaired_x = flags.gan || flags.pseudo || flags.cyclegan || (flags.concept && b.unpaired_x.is_some());
    let unpaired = if needs_unpaired_x {
        let x = g.constant(need(b.unpaired_x, "unpaired images")?.clone());
        Some(m.encode_images(g, x)?)
    } else {
        None
    };

    // One teacher-forced pass over the pairs serves both the supervised
    // and the triplet terms.
    let paired_nll = if flags.paired_ce || flags.triplet {
        Some(m.decode_teacher(g, paired.expect("encoded above").z, &b.paired_y)?)
    } else {
        None
    };
    if flags.paired_ce {
        let cap = g.mean(paired_nll.expect("decoded above").mean)?;
        out.cap = Some(cap);
        parts.push(cap);
    }

    if flags.gan || flags.cyclegan {
        let zy_u = m.encode_captions(g, &b.unpaired_y)?;
        let zx_u = unpaired.expect("encoded above").z;
        if flags.gan {
            let p = paired.expect("encoded above");
            let zy_p = m.encode_captions(g, &b.paired_y)?;
            let t = gan_utility(m, g, (p.z, zy_p), zx_u, zy_u, w)?;
            let u_tilde = g.add(t.u, t.reg)?;
            parts.push(g.scale(u_tilde, w.lambda_1));
            out.gan = Some(t);
        } else {
            let t = cyclegan_loss(m, g, zx_u, zy_u)?;
            parts.push(t.cycle);
            parts.push(t.adversarial);
            out.cycle = Some(t);
        }
    }

    if flags.pseudo {
        let ones_x = vec![1.0; b.pseudo_y.len()];
        let ones_y = vec![1.0; b.unpaired_y.len()];
        let (ax, ay) = if flags.confidence { (&b.alpha_x[..], &b.alpha_y[..]) } else { (&ones_x[..], &ones_y[..]) };
        let zx_u = unpaired.expect("encoded above").z;
        let ce_x = m.decode_teacher(g, zx_u, &b.pseudo_y)?.mean;
        let px = g.constant(need(b.pseudo_x, "pseudo images")?.clone());
        let zpx = m.encode_images(g, px)?.z;
        let ce_y = m.decode_teacher(g, zpx, &b.unpaired_y)?.mean;
        let p = pseudo_ce_loss(g, Some((ce_x, ax)), Some((ce_y, ay)), w)?;
        out.pseudo = Some(p);
        parts.push(p);
    }

    if flags.triplet {
        let p = paired.expect("encoded above");
        let nx = g.constant(need(b.neg_x, "negative images")?.clone());
        let zn = m.encode_images(g, nx)?.z;
        let pos = paired_nll.expect("decoded above").sum;
        let t = triplet_with_positive(m, g, pos, p.z, &b.paired_y, zn, &b.neg_y)?;
        out.triplet = Some(t);
        parts.push(g.scale(t, w.lambda_2));
    }

    if flags.concept {
        let p = paired.expect("encoded above");
        let pen = match unpaired {
            Some(u) => g.concat_rows(&[p.penultimate, u.penultimate])?,
            None => p.penultimate,
        };
        let v = m.concept_regress(g, pen)?;
        let c = concept_loss(g, v, need(b.concepts, "concept vectors")?)?;
        out.concept = Some(c);
        parts.push(g.scale(c, w.lambda_3));
    }

    out.total = sum_nodes(g, &parts)?;
    Ok(out)
}

/// What the discriminator step minimizes: `-U` for the pair discriminator
/// or the negated adversarial terms for the cycle baseline.
pub fn discriminator_objective(m: &ModelBundle, g: &mut Graph, b: &LossBatch, w: &LossWeights, flags: &VariantFlags) -> Result<NodeId> {
    flags.validate()?;
    let ux = g.constant(need(b.unpaired_x, "unpaired images")?.clone());
    let zx_u = m.encode_images(g, ux)?.z;
    let zy_u = m.encode_captions(g, &b.unpaired_y)?;
    let objective = if flags.gan {
        let px = g.constant(need(b.paired_x, "paired")?.clone());
        let zx_p = m.encode_images(g, px)?.z;
        let zy_p = m.encode_captions(g, &b.paired_y)?;
        gan_utility(m, g, (zx_p, zy_p), zx_u, zy_u, w)?.u
    } else if flags.cyclegan {
        cyclegan_loss(m, g, zx_u, zy_u)?.adversarial
    } else {
        return Err(Error::InconsistentFlags("variant has no discriminator".into()));
    };
    Ok(g.scale(objective, -1.0))
}
