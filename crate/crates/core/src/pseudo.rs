//! Pseudo-label retrieval: each unpaired image is matched with the caption
//! in a small random pool that the pair discriminator scores highest, and
//! vice versa. The winning score is the label's confidence.

use std::cell::Cell;
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ImageToCaption,
    CaptionToImage,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToCaption => "image_to_caption",
            Direction::CaptionToImage => "caption_to_image",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoAssignment {
    pub anchor: usize,
    pub matched: usize,
    pub confidence: f64,
    pub direction: Direction,
}

/// Candidate ids, sorted ascending, drawn from an unpaired set.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchPool {
    pub ids: Vec<usize>,
    pub fraction: f64,
}

impl SearchPool {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `max(1, ceil(fraction * n))`, tolerant of rounding in `fraction * n`.
pub fn pool_size(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (k as usize).clamp(1, n.max(1))
}

/// Uniform sample without replacement of `pool_size(n, fraction)` ids.
pub fn subsample_pool(n: usize, fraction: f64, rng: &mut impl Rng) -> Result<SearchPool> {
    if n == 0 {
        return Err(Error::EmptyBatch("unpaired set"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("pool fraction must be in (0, 1], got {fraction}")));
    }
    let mut ids = index::sample(rng, n, pool_size(n, fraction)).into_vec();
    ids.sort_unstable();
    Ok(SearchPool { ids, fraction })
}

/// Scores image/caption pairs by id. Implementations return values in
/// `[0, 1]`.
pub trait PairScorer {
    fn score(&self, image: usize, caption: usize) -> Result<f64>;

    /// Scores of `image` against each caption in `captions`.
    fn score_captions(&self, image: usize, captions: &[usize]) -> Result<Vec<f64>> {
        captions.iter().map(|&c| self.score(image, c)).collect()
    }

    /// Scores of each image in `images` against `caption`.
    fn score_images(&self, images: &[usize], caption: usize) -> Result<Vec<f64>> {
        images.iter().map(|&i| self.score(i, caption)).collect()
    }
}

/// Wraps a scorer and counts every pair it evaluates.
pub struct CountingScorer<S> {
    pub inner: S,
    count: Cell<u64>,
}

impl<S: PairScorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self { inner, count: Cell::new(0) }
    }

    pub fn evaluations(&self) -> u64 {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }

    fn bump(&self, n: usize) {
        self.count.set(self.count.get() + n as u64);
    }
}

impl<S: PairScorer> PairScorer for CountingScorer<S> {
    fn score(&self, image: usize, caption: usize) -> Result<f64> {
        self.bump(1);
        self.inner.score(image, caption)
    }

    fn score_captions(&self, image: usize, captions: &[usize]) -> Result<Vec<f64>> {
        self.bump(captions.len());
        self.inner.score_captions(image, captions)
    }

    fn score_images(&self, images: &[usize], caption: usize) -> Result<Vec<f64>> {
        self.bump(images.len());
        self.inner.score_images(images, caption)
    }
}

/// The pair discriminator over codes encoded once per step. Row `i` of
/// `zx` is image id `i`; row `j` of `zy` is caption id `j`.
pub struct ModelScorer<'a> {
    model: &'a ModelBundle,
    zx: Tensor,
    zy: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelBundle, zx: Tensor, zy: Tensor) -> Self {
        Self { model, zx, zy }
    }

    fn rows(t: &Tensor, id: usize, n: usize) -> Result<Tensor> {
        if id >= t.rows() {
            return Err(Error::InvalidArgument(format!("id {id} outside {} encoded rows", t.rows())));
        }
        Tensor::from_rows(&vec![t.row_slice(id).to_vec(); n])
    }

    fn select(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if let Some(id) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!("id {id} outside {} encoded rows", t.rows())));
        }
        Ok(t.select_rows(ids))
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score(&self, image: usize, caption: usize) -> Result<f64> {
        Ok(self.score_captions(image, &[caption])?[0])
    }

    fn score_captions(&self, image: usize, captions: &[usize]) -> Result<Vec<f64>> {
        let zx = Self::rows(&self.zx, image, captions.len())?;
        self.model.score_rows(&zx, &Self::select(&self.zy, captions)?)
    }

    fn score_images(&self, images: &[usize], caption: usize) -> Result<Vec<f64>> {
        let zy = Self::rows(&self.zy, caption, images.len())?;
        self.model.score_rows(&Self::select(&self.zx, images)?, &zy)
    }
}

/// Highest score wins; equal scores go to the lowest candidate id.
fn best(pool: &SearchPool, scores: &[f64]) -> Result<(usize, f64)> {
    let mut winner: Option<(usize, f64)> = None;
    for (&id, &s) in pool.ids.iter().zip(scores) {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::InvalidArgument(format!("score {s} for candidate {id} outside [0, 1]")));
        }
        winner = match winner {
            Some((wid, ws)) if ws > s || (ws == s && wid < id) => Some((wid, ws)),
            _ => Some((id, s)),
        };
    }
    winner.ok_or(Error::EmptyBatch("search pool"))
}

pub fn assign_caption(image: usize, pool: &SearchPool, scorer: &impl PairScorer) -> Result<PseudoAssignment> {
    if pool.is_empty() {
        return Err(Error::EmptyBatch("search pool"));
    }
    let scores = scorer.score_captions(image, &pool.ids)?;
    let (matched, confidence) = best(pool, &scores)?;
    Ok(PseudoAssignment { anchor: image, matched, confidence, direction: Direction::ImageToCaption })
}

pub fn assign_image(caption: usize, pool: &SearchPool, scorer: &impl PairScorer) -> Result<PseudoAssignment> {
    if pool.is_empty() {
        return Err(Error::EmptyBatch("search pool"));
    }
    let scores = scorer.score_images(&pool.ids, caption)?;
    let (matched, confidence) = best(pool, &scores)?;
    Ok(PseudoAssignment { anchor: caption, matched, confidence, direction: Direction::CaptionToImage })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    pub for_images: Vec<PseudoAssignment>,
    pub for_captions: Vec<PseudoAssignment>,
    /// Discriminator evaluations made per direction.
    pub evaluations: [u64; 2],
}

/// Labels every anchor against one shared pool per direction.
pub fn batch_assign<S: PairScorer>(
    images: &[usize],
    captions: &[usize],
    caption_pool: &SearchPool,
    image_pool: &SearchPool,
    scorer: &CountingScorer<S>,
) -> Result<BatchAssignment> {
    let start = scorer.evaluations();
    let for_images = images.iter().map(|&i| assign_caption(i, caption_pool, scorer)).collect::<Result<Vec<_>>>()?;
    let mid = scorer.evaluations();
    let for_captions = captions.iter().map(|&c| assign_image(c, image_pool, scorer)).collect::<Result<Vec<_>>>()?;
    let end = scorer.evaluations();
    Ok(BatchAssignment { for_images, for_captions, evaluations: [mid - start, end - mid] })
}

pub const CSV_HEADER: &str = "anchor_id,matched_id,confidence,direction";

pub fn write_assignments_csv(out: &mut impl Write, rows: &[PseudoAssignment]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for a in rows {
        writeln!(out, "{},{},{},{}", a.anchor, a.matched, a.confidence, a.direction)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{caption_of, generate_scene, parse_caption, Scene};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 0.9 when the caption describes the image's scene, else 0.1.
    struct Oracle {
        images: Vec<Scene>,
        captions: Vec<Scene>,
    }

    impl PairScorer for Oracle {
        fn score(&self, image: usize, caption: usize) -> Result<f64> {
            let same = self.images[image].attribute_key() == self.captions[caption].attribute_key();
            Ok(if same { 0.9 } else { 0.1 })
        }
    }

    struct Table(Vec<Vec<f64>>);

    impl PairScorer for Table {
        fn score(&self, image: usize, caption: usize) -> Result<f64> {
            Ok(self.0[image][caption])
        }
    }

    fn full(n: usize) -> SearchPool {
        SearchPool { ids: (0..n).collect(), fraction: 1.0 }
    }

    #[test]
    fn pool_sizes() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample_pool(100_000, 0.01, &mut r).unwrap().len(), 1000);
        assert_eq!(subsample_pool(50, 1.0, &mut r).unwrap().ids, (0..50).collect::<Vec<_>>());
        assert_eq!(subsample_pool(50, 1e-6, &mut r).unwrap().len(), 1);
        assert_eq!(pool_size(300, 0.07), 21);
        assert!(subsample_pool(0, 0.5, &mut r).is_err());
        assert!(subsample_pool(10, 0.0, &mut r).is_err());
        assert!(subsample_pool(10, 1.5, &mut r).is_err());
        let a = subsample_pool(1000, 0.05, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = subsample_pool(1000, 0.05, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn singleton_pool_returns_its_candidate() {
        let t = Table(vec![vec![0.0, 0.01, 0.0]; 3]);
        let pool = SearchPool { ids: vec![2], fraction: 0.3 };
        assert_eq!(assign_caption(1, &pool, &t).unwrap().matched, 2);
        assert_eq!(assign_image(0, &pool, &t).unwrap().matched, 2);
        assert!(assign_caption(0, &SearchPool { ids: vec![], fraction: 0.1 }, &t).is_err());
    }

    #[test]
    fn oracle_scorer_finds_the_match() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let images: Vec<Scene> = (0..30).map(|_| generate_scene(&mut r)).collect();
        let mut captions: Vec<Scene> = (0..30).map(|_| generate_scene(&mut r)).collect();
        captions.retain(|c| images.iter().all(|i| i.attribute_key() != c.attribute_key()));
        // Plant the round-tripped caption of image 5 at a known position.
        let planted = parse_caption(caption_of(&images[5]).tokens()).unwrap();
        captions.insert(3, planted.clone());
        let oracle = Oracle { images: images.clone(), captions: captions.clone() };
        let a = assign_caption(5, &full(captions.len()), &oracle).unwrap();
        assert_eq!((a.matched, a.confidence), (3, 0.9));
        let b = assign_image(3, &full(images.len()), &oracle).unwrap();
        assert_eq!(b.confidence, 0.9);
        assert_eq!(images[b.matched].attribute_key(), planted.attribute_key());
        // Exhaustive scan agrees.
        let scan = (0..captions.len()).map(|c| oracle.score(5, c).unwrap()).enumerate().fold((0, -1.0), |a, (i, s)| if s > a.1 { (i, s) } else { a });
        assert_eq!(scan, (a.matched, a.confidence));
    }

    #[test]
    fn ties_go_to_lowest_id_and_argmax_is_invariant() {
        let t = Table(vec![vec![0.2, 0.7, 0.3, 0.7]]);
        let pool = SearchPool { ids: vec![3, 1, 0], fraction: 1.0 };
        let a = assign_caption(0, &pool, &t).unwrap();
        assert_eq!((a.matched, a.confidence), (1, 0.7));
        let squashed = Table(vec![t.0[0].iter().map(|s| s * s * s).collect()]);
        let b = assign_caption(0, &pool, &squashed).unwrap();
        assert_eq!(b.matched, a.matched);
        assert_eq!(b.confidence, squashed.0[0][1]);
        assert!(assign_caption(0, &pool, &Table(vec![vec![1.5; 4]])).is_err());
    }

    #[test]
    fn evaluation_count_is_batch_times_pool() {
        let t = CountingScorer::new(Table(vec![vec![0.5; 400]; 400]));
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cp = subsample_pool(400, 0.1, &mut r).unwrap();
        let ip = subsample_pool(400, 0.1, &mut r).unwrap();
        let anchors: Vec<usize> = (0..25).collect();
        let out = batch_assign(&anchors, &anchors[..10], &cp, &ip, &t).unwrap();
        assert_eq!(out.evaluations, [25 * 40, 10 * 40]);
        assert_eq!(t.evaluations(), 35 * 40);
        let one = SearchPool { ids: vec![7], fraction: 0.001 };
        t.reset();
        let out = batch_assign(&anchors, &anchors, &one, &one, &t).unwrap();
        assert_eq!(out.evaluations, [25, 25]);
    }

    #[test]
    fn model_scorer_matches_direct_scores() {
        use crate::models::ModelDims;
        let m = ModelBundle::new(ModelDims::default(), false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let zx = Tensor::matrix(4, 32, (0..128).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let zy = Tensor::matrix(5, 32, (0..160).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = ModelScorer::new(&m, zx.clone(), zy.clone());
        let row = s.score_captions(2, &[0, 4, 1]).unwrap();
        let col = s.score_images(&[3, 2], 4).unwrap();
        assert_eq!(row[1], col[1]);
        assert_eq!(row[1], m.discriminate(zx.row_slice(2), zy.row_slice(4)).unwrap());
        assert!(s.score(4, 0).is_err());
        let a = assign_caption(1, &full(5), &s).unwrap();
        assert_eq!(a.confidence, s.score(1, a.matched).unwrap());
    }

    #[test]
    fn csv_dump() {
        let rows = [
            PseudoAssignment { anchor: 3, matched: 9, confidence: 0.5, direction: Direction::ImageToCaption },
            PseudoAssignment { anchor: 1, matched: 0, confidence: 0.25, direction: Direction::CaptionToImage },
        ];
        let mut buf = Vec::new();
        write_assignments_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "anchor_id,matched_id,confidence,direction\n3,9,0.5,image_to_caption\n1,0,0.25,caption_to_image\n");
    }
}
