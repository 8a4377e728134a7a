//! Synthetic two-modality world: attribute scenes stand in for images,
//! template captions stand in for text, and a scene's averaged attribute
//! encoding stands in for an external concept vector.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};

use crate::error::{Error, Result};

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "hexagon"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SIZES: [&str; 2] = ["small", "big"];

pub const MAX_OBJECTS: usize = 3;
/// Width of one object's one-hot block: shape, then color, then size.
pub const BLOCK: usize = SHAPES.len() + COLORS.len() + SIZES.len();
pub const FEATURE_DIM: usize = MAX_OBJECTS * BLOCK;
pub const CONCEPT_DIM: usize = BLOCK;

pub const END: usize = 0;
pub const START: usize = 1;
pub const ARTICLE: usize = 2;
pub const AND: usize = 3;
const SIZE_BASE: usize = 4;
const COLOR_BASE: usize = SIZE_BASE + SIZES.len();
const SHAPE_BASE: usize = COLOR_BASE + COLORS.len();
pub const VOCAB_SIZE: usize = SHAPE_BASE + SHAPES.len();
/// Start, four words per object, a connective between objects, end.
pub const MAX_CAPTION_LEN: usize = 2 + 4 * MAX_OBJECTS + (MAX_OBJECTS - 1);

/// Word for every token id, in id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<end>", "<start>", "a", "and"];
    v.extend(SIZES);
    v.extend(COLORS);
    v.extend(SHAPES);
    v
}

pub fn color_token(color: usize) -> usize {
    COLOR_BASE + color
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
}

impl Object {
    pub fn new(shape: usize, color: usize, size: usize) -> Result<Self> {
        if shape >= SHAPES.len() || color >= COLORS.len() || size >= SIZES.len() {
            return Err(Error::InvalidArgument(format!("object ({shape}, {color}, {size}) out of range")));
        }
        Ok(Self { shape, color, size })
    }

    fn encode_into(&self, block: &mut [f64]) {
        block[self.shape] = 1.0;
        block[SHAPES.len() + self.color] = 1.0;
        block[SHAPES.len() + COLORS.len() + self.size] = 1.0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    objects: Vec<Object>,
}

impl Scene {
    pub fn new(objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::InvalidArgument(format!("scene needs 1..={MAX_OBJECTS} objects, got {}", objects.len())));
        }
        Ok(Self { objects })
    }

    pub fn objects(&self) -> &[Object] {
        &self.objects
    }

    /// Order-free identity of the scene, used to judge attribute equality.
    pub fn attribute_key(&self) -> Vec<Object> {
        let mut k = self.objects.clone();
        k.sort();
        k
    }

    pub fn uses_color(&self, color: usize) -> bool {
        self.objects.iter().any(|o| o.color == color)
    }
}

/// Attribute distribution for scene draws. The default is uniform.
#[derive(Debug, Clone, Default)]
pub struct SceneSampler {
    /// Relative color frequencies; `None` means uniform.
    pub color_weights: Option<Vec<f64>>,
    /// Color never drawn.
    pub excluded_color: Option<usize>,
}

impl SceneSampler {
    /// Geometrically skewed colors, mimicking a shifted unpaired source.
    pub fn shifted() -> Self {
        Self { color_weights: Some((0..COLORS.len()).map(|c| 0.6f64.powi(c as i32)).collect()), excluded_color: None }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Scene {
        let mut weights = self.color_weights.clone().unwrap_or_else(|| vec![1.0; COLORS.len()]);
        if let Some(c) = self.excluded_color {
            weights[c] = 0.0;
        }
        let colors = WeightedIndex::new(&weights).expect("color weights have positive total");
        let k = rng.gen_range(1..=MAX_OBJECTS);
        let objects = (0..k)
            .map(|_| Object {
                shape: rng.gen_range(0..SHAPES.len()),
                color: colors.sample(rng),
                size: rng.gen_range(0..SIZES.len()),
            })
            .collect();
        Scene { objects }
    }
}

/// Uniform scene: 1 to 3 objects, every attribute uniform.
pub fn generate_scene(rng: &mut impl Rng) -> Scene {
    SceneSampler::default().sample(rng)
}

/// One-hot blocks per object slot, empty slots zero, plus Gaussian noise.
pub fn render_features(scene: &Scene, noise_std: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {noise_std}")));
    }
    let mut f = vec![0.0; FEATURE_DIM];
    for (slot, o) in scene.objects.iter().enumerate() {
        o.encode_into(&mut f[slot * BLOCK..(slot + 1) * BLOCK]);
    }
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut f {
            *v += n.sample(rng);
        }
    }
    Ok(f)
}

/// Token sequence of a well-formed caption.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ToyCaption(Vec<usize>);

impl ToyCaption {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != START || tokens[tokens.len() - 1] != END {
            return Err(Error::InvalidArgument("caption must run from <start> to <end>".into()));
        }
        if tokens.len() > MAX_CAPTION_LEN {
            return Err(Error::InvalidArgument(format!("caption longer than {MAX_CAPTION_LEN}")));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= VOCAB_SIZE) {
            return Err(Error::InvalidArgument(format!("token {t} outside vocabulary")));
        }
        Ok(Self(tokens))
    }

    /// Full sequence including `<start>` and `<end>`.
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    /// Words after `<start>`, ending with `<end>`: the decoder's targets.
    pub fn targets(&self) -> &[usize] {
        &self.0[1..]
    }
}

/// `a <size> <color> <shape> [and a <size> <color> <shape>]*`, objects in
/// scene order.
pub fn caption_of(scene: &Scene) -> ToyCaption {
    let mut t = vec![START];
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            t.push(AND);
        }
        t.extend([ARTICLE, SIZE_BASE + o.size, COLOR_BASE + o.color, SHAPE_BASE + o.shape]);
    }
    t.push(END);
    ToyCaption(t)
}

/// Inverse of [`caption_of`]. Leading `<start>` and trailing `<end>` are
/// optional; anything off-grammar yields `None`.
pub fn parse_caption(tokens: &[usize]) -> Option<Scene> {
    let mut t = tokens;
    if t.first() == Some(&START) {
        t = &t[1..];
    }
    if t.last() == Some(&END) {
        t = &t[..t.len() - 1];
    }
    let mut objects = Vec::new();
    let mut rest = t;
    loop {
        if !objects.is_empty() {
            rest = rest.strip_prefix(&[AND])?;
        }
        let [a, s, c, sh, tail @ ..] = rest else { return None };
        let in_range = |v: usize, base: usize, n: usize| (base..base + n).contains(&v);
        if *a != ARTICLE
            || !in_range(*s, SIZE_BASE, SIZES.len())
            || !in_range(*c, COLOR_BASE, COLORS.len())
            || !in_range(*sh, SHAPE_BASE, SHAPES.len())
        {
            return None;
        }
        objects.push(Object { shape: sh - SHAPE_BASE, color: c - COLOR_BASE, size: s - SIZE_BASE });
        rest = tail;
        if rest.is_empty() {
            break;
        }
    }
    Scene::new(objects).ok()
}

pub fn caption_text(tokens: &[usize]) -> String {
    let vocab = vocabulary();
    tokens
        .iter()
        .filter(|t| **t != START && **t != END)
        .map(|t| vocab.get(*t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean of the per-object attribute encodings.
pub fn concept_of(scene: &Scene) -> Vec<f64> {
    let mut v = vec![0.0; CONCEPT_DIM];
    let mut block = vec![0.0; BLOCK];
    for o in &scene.objects {
        block.fill(0.0);
        o.encode_into(&mut block);
        for (a, b) in v.iter_mut().zip(&block) {
            *a += b;
        }
    }
    let k = scene.objects.len() as f64;
    v.iter_mut().for_each(|a| *a /= k);
    v
}

/// Probability that two independent uniform scenes have the same attribute
/// multiset: the hit rate of a uniformly random pseudo-label.
pub fn random_match_probability() -> f64 {
    let kinds = SHAPES.len() * COLORS.len() * SIZES.len();
    let per_k = 1.0 / MAX_OBJECTS as f64;
    let mut total = 0.0;
    for k in 1..=MAX_OBJECTS {
        // Sum over multisets of (ordered draws producing it / kinds^k)^2.
        let mut acc = 0.0;
        let mut counts = vec![0usize; k];
        multisets(kinds, k, 0, &mut counts, 0, &mut |m| {
            let p = orderings(m) / (kinds as f64).powi(k as i32);
            acc += p * p;
        });
        total += per_k * per_k * acc;
    }
    total
}

fn multisets(kinds: usize, k: usize, start: usize, cur: &mut Vec<usize>, depth: usize, f: &mut impl FnMut(&[usize])) {
    if depth == k {
        f(cur);
        return;
    }
    for v in start..kinds {
        cur[depth] = v;
        multisets(kinds, k, v, cur, depth + 1, f);
    }
}

/// `k! / prod(multiplicity!)` for a sorted multiset.
fn orderings(m: &[usize]) -> f64 {
    let fact = |n: usize| (1..=n).product::<usize>() as f64;
    let mut denom = 1.0;
    let mut i = 0;
    while i < m.len() {
        let j = m[i..].iter().take_while(|v| **v == m[i]).count();
        denom *= fact(j);
        i += j;
    }
    fact(m.len()) / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub total: usize,
    pub paired_fraction: f64,
    pub noise_std: f64,
    pub test_size: usize,
    /// Keep one color word out of the paired set.
    pub novel_word: bool,
    /// Skew color frequencies in the unpaired sets.
    pub domain_shift: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { total: 10_000, paired_fraction: 0.01, noise_std: 0.1, test_size: 200, novel_word: false, domain_shift: false }
    }
}

/// Color withheld from the paired set under novel-word injection.
pub const NOVEL_COLOR: usize = COLORS.len() - 1;

/// A scene with both modalities. `id` is the provenance index.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub scene: Scene,
    pub features: Vec<f64>,
    pub caption: ToyCaption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub paired: Vec<Example>,
    /// Captions of these examples are ground truth for evaluation only.
    pub unpaired_images: Vec<Example>,
    /// Features of these examples are ground truth for evaluation only.
    pub unpaired_captions: Vec<Example>,
    /// Held-out pairs from the paired-set distribution.
    pub test: Vec<Example>,
}

/// `ceil(fraction * total)`, robust to the representation error of
/// fractions like 0.01.
pub fn paired_count(total: usize, fraction: f64) -> usize {
    let exact = fraction * total as f64;
    let r = exact.round();
    if (exact - r).abs() < 1e-9 {
        r as usize
    } else {
        exact.ceil() as usize
    }
}

/// Generates the paired, unpaired and test sets. Provenance ids
/// `0..paired` are paired; the rest alternate between unpaired images
/// (even offset) and unpaired captions (odd offset); test ids follow.
pub fn make_splits<R: Rng>(cfg: &DataConfig, rng: &mut R) -> Result<DatasetSplits> {
    if !(cfg.paired_fraction > 0.0 && cfg.paired_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("paired fraction must be in (0, 1], got {}", cfg.paired_fraction)));
    }
    let n_paired = paired_count(cfg.total, cfg.paired_fraction);
    if n_paired == 0 {
        return Err(Error::InvalidArgument(format!(
            "paired fraction {} of {} yields no pairs",
            cfg.paired_fraction, cfg.total
        )));
    }
    let paired_sampler = SceneSampler { excluded_color: cfg.novel_word.then_some(NOVEL_COLOR), ..Default::default() };
    let unpaired_sampler = if cfg.domain_shift { SceneSampler::shifted() } else { SceneSampler::default() };
    let make = |id: usize, sampler: &SceneSampler, rng: &mut R| -> Result<Example> {
        let scene = sampler.sample(rng);
        let features = render_features(&scene, cfg.noise_std, rng)?;
        let caption = caption_of(&scene);
        Ok(Example { id, scene, features, caption })
    };

    let mut splits = DatasetSplits { paired: Vec::new(), unpaired_images: Vec::new(), unpaired_captions: Vec::new(), test: Vec::new() };
    for id in 0..n_paired {
        splits.paired.push(make(id, &paired_sampler, rng)?);
    }
    for id in n_paired..cfg.total {
        let ex = make(id, &unpaired_sampler, rng)?;
        if (id - n_paired).is_multiple_of(2) {
            splits.unpaired_images.push(ex);
        } else {
            splits.unpaired_captions.push(ex);
        }
    }
    if cfg.novel_word && !splits.unpaired_captions.is_empty() && !splits.unpaired_captions.iter().any(|e| e.scene.uses_color(NOVEL_COLOR)) {
        // Guarantee the diagnostic word shows up at least once.
        let ex = &mut splits.unpaired_captions[0];
        let mut objects = ex.scene.objects.clone();
        objects[0].color = NOVEL_COLOR;
        ex.scene = Scene::new(objects)?;
        ex.features = render_features(&ex.scene, cfg.noise_std, rng)?;
        ex.caption = caption_of(&ex.scene);
    }
    let test_sampler = SceneSampler::default();
    for id in cfg.total..cfg.total + cfg.test_size {
        splits.test.push(make(id, &test_sampler, rng)?);
    }
    Ok(splits)
}

/// Token ids appearing in the captions of `examples`.
pub fn caption_vocab(examples: &[Example]) -> BTreeSet<usize> {
    examples.iter().flat_map(|e| e.caption.tokens().iter().copied()).collect()
}

impl DatasetSplits {
    /// Header line with the vocabulary, then one record per line:
    /// `split id k (shape color size)*k dim features.. len tokens..`.
    pub fn to_text(&self) -> String {
        let mut s = format!("vocab {}\n", vocabulary().join(" "));
        let sets = [
            ("paired", &self.paired, true, true),
            ("unpaired_image", &self.unpaired_images, true, false),
            ("unpaired_caption", &self.unpaired_captions, false, true),
            ("test", &self.test, true, true),
        ];
        for (tag, set, with_features, with_caption) in sets {
            for e in set {
                let _ = write!(s, "{tag} {} {}", e.id, e.scene.objects.len());
                for o in &e.scene.objects {
                    let _ = write!(s, " {} {} {}", o.shape, o.color, o.size);
                }
                let feats: &[f64] = if with_features { &e.features } else { &[] };
                let _ = write!(s, " {}", feats.len());
                for v in feats {
                    let _ = write!(s, " {v:e}");
                }
                let toks: &[usize] = if with_caption { e.caption.tokens() } else { &[] };
                let _ = write!(s, " {}", toks.len());
                for t in toks {
                    let _ = write!(s, " {t}");
                }
                s.push('\n');
            }
        }
        s
    }

    /// Inverse of [`DatasetSplits::to_text`]. Dropped modalities come back
    /// as zero features or the scene's ground-truth caption.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.starts_with("vocab ") => {
                let words: Vec<&str> = l.split_whitespace().skip(1).collect();
                if words != vocabulary() {
                    return Err(Error::Parse { line: 1, msg: "vocabulary differs".into() });
                }
            }
            _ => return Err(Error::Parse { line: 1, msg: "missing vocab header".into() }),
        }
        let mut out = DatasetSplits { paired: Vec::new(), unpaired_images: Vec::new(), unpaired_captions: Vec::new(), test: Vec::new() };
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| Error::Parse { line: ln + 1, msg: msg.to_string() };
            let mut it = line.split_whitespace();
            let tag = it.next().ok_or_else(|| perr("empty record"))?;
            let mut num = |what: &str| -> Result<usize> {
                it.next().and_then(|t| t.parse().ok()).ok_or_else(|| perr(what))
            };
            let id = num("id")?;
            let k = num("object count")?;
            let mut objects = Vec::with_capacity(k);
            for _ in 0..k {
                objects.push(Object::new(num("shape")?, num("color")?, num("size")?).map_err(|e| perr(&e.to_string()))?);
            }
            let scene = Scene::new(objects).map_err(|e| perr(&e.to_string()))?;
            let dim = num("feature count")?;
            let mut features = Vec::with_capacity(dim);
            for _ in 0..dim {
                features.push(it.next().and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| perr("feature"))?);
            }
            let mut num = |what: &str| -> Result<usize> {
                it.next().and_then(|t| t.parse().ok()).ok_or_else(|| perr(what))
            };
            let len = num("token count")?;
            let mut toks = Vec::with_capacity(len);
            for _ in 0..len {
                toks.push(num("token")?);
            }
            if features.is_empty() {
                features = vec![0.0; FEATURE_DIM];
            }
            let caption = if toks.is_empty() { caption_of(&scene) } else { ToyCaption::new(toks).map_err(|e| perr(&e.to_string()))? };
            let ex = Example { id, scene, features, caption };
            match tag {
                "paired" => out.paired.push(ex),
                "unpaired_image" => out.unpaired_images.push(ex),
                "unpaired_caption" => out.unpaired_captions.push(ex),
                "test" => out.test.push(ex),
                other => return Err(perr(&format!("unknown split tag {other}"))),
            }
        }
        Ok(out)
    }
}
