//! Caption and retrieval metrics: BLEU-1..4, recall@k from pair scores,
//! and the attribute accuracy of pseudo-labels.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pseudo::{Direction, PairScorer, PseudoAssignment};
use crate::toyworld::{parse_caption, Scene, ToyCaption};

/// BLEU-n for n up to `max_n`; orders above `max_n` are left at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuReport {
    pub max_n: usize,
    pub bleu: [f64; 4],
    /// Clipped n-gram precision per order.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
}

/// Matched and total hypothesis n-grams per order plus lengths, summed
/// over a corpus before precisions are taken.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuCounts {
    matched: [usize; 4],
    total: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

fn ngrams(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_order(max_n: usize) -> Result<()> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be in 1..=4, got {max_n}")));
    }
    Ok(())
}

fn counts(hyp: &[usize], refs: &[&[usize]], max_n: usize) -> Result<BleuCounts> {
    if refs.is_empty() {
        return Err(Error::EmptyBatch("references"));
    }
    let mut c = BleuCounts { hyp_len: hyp.len(), ..Default::default() };
    // Closest reference length, shorter on ties.
    c.ref_len = refs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(hyp.len()), l)).expect("nonempty");
    for n in 1..=max_n {
        let h = ngrams(hyp, n);
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in refs {
            for (g, k) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        c.total[n - 1] = h.values().sum();
        c.matched[n - 1] = h.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    Ok(c)
}

fn report(c: &BleuCounts, max_n: usize) -> BleuReport {
    let mut r = BleuReport { max_n, bleu: [0.0; 4], precisions: [0.0; 4], brevity_penalty: 0.0 };
    if c.hyp_len == 0 {
        return r;
    }
    r.brevity_penalty = if c.hyp_len >= c.ref_len { 1.0 } else { (1.0 - c.ref_len as f64 / c.hyp_len as f64).exp() };
    for n in 0..max_n {
        r.precisions[n] = if c.total[n] == 0 { 0.0 } else { c.matched[n] as f64 / c.total[n] as f64 };
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if r.precisions[n] == 0.0 {
            break;
        }
        log_sum += r.precisions[n].ln();
        r.bleu[n] = r.brevity_penalty * (log_sum / (n + 1) as f64).exp();
    }
    r
}

/// Sentence BLEU with clipped counts and the brevity penalty. An empty
/// hypothesis scores 0 everywhere.
pub fn bleu(hyp: &[usize], refs: &[&[usize]], max_n: usize) -> Result<BleuReport> {
    check_order(max_n)?;
    Ok(report(&counts(hyp, refs, max_n)?, max_n))
}

/// Corpus BLEU: counts and lengths are summed over all pairs first.
pub fn corpus_bleu(pairs: &[(&[usize], Vec<&[usize]>)], max_n: usize) -> Result<BleuReport> {
    check_order(max_n)?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("corpus"));
    }
    let mut total = BleuCounts::default();
    for (h, refs) in pairs {
        let c = counts(h, refs, max_n)?;
        for n in 0..4 {
            total.matched[n] += c.matched[n];
            total.total[n] += c.total[n];
        }
        total.hyp_len += c.hyp_len;
        total.ref_len += c.ref_len;
    }
    Ok(report(&total, max_n))
}

/// Words of a caption between `<start>` and `<end>`.
pub fn caption_words(tokens: &[usize]) -> &[usize] {
    use crate::toyworld::{END, START};
    let t = tokens.strip_prefix(&[START]).unwrap_or(tokens);
    match t.iter().position(|&x| x == END) {
        Some(i) => &t[..i],
        None => t,
    }
}

/// Caption-to-image retrieval over `n` eval pairs, where caption `i`
/// belongs to image `i`. Each query ranks its true image among
/// `pool_size - 1` distinct random distractors; equal scores rank the
/// lower image id first. Returns recall@k for each k in `ks`.
pub fn retrieval_recall(scorer: &impl PairScorer, n: usize, pool_size: usize, ks: &[usize], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::EmptyBatch("eval pairs"));
    }
    if pool_size == 0 || pool_size > n {
        return Err(Error::InvalidArgument(format!("pool size {pool_size} must be in 1..={n}")));
    }
    if ks.windows(2).any(|w| w[0] > w[1]) || ks.first() == Some(&0) {
        return Err(Error::InvalidArgument(format!("ks must be sorted and >= 1: {ks:?}")));
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut pool: Vec<usize> = if pool_size == n {
            (0..n).collect()
        } else {
            // Distractors are drawn from the other n - 1 images.
            index::sample(rng, n - 1, pool_size - 1).into_iter().map(|i| if i >= q { i + 1 } else { i }).chain([q]).collect()
        };
        pool.sort_unstable();
        let scores = scorer.score_images(&pool, q)?;
        let truth = scores[pool.binary_search(&q).expect("query in pool")];
        let rank = 1 + pool.iter().zip(&scores).filter(|(&id, &s)| s > truth || (s == truth && id < q)).count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

/// Fraction of assignments whose image and caption describe the same
/// multiset of objects. Image ids index `images`, caption ids `captions`;
/// an unparseable caption counts as a miss.
pub fn pseudo_accuracy(assignments: &[PseudoAssignment], images: &[Scene], captions: &[ToyCaption]) -> Result<f64> {
    if assignments.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for a in assignments {
        let (img, cap) = match a.direction {
            Direction::ImageToCaption => (a.anchor, a.matched),
            Direction::CaptionToImage => (a.matched, a.anchor),
        };
        let scene = images.get(img).ok_or_else(|| Error::InvalidArgument(format!("image id {img} out of range")))?;
        let caption = captions.get(cap).ok_or_else(|| Error::InvalidArgument(format!("caption id {cap} out of range")))?;
        if parse_caption(caption.tokens()).is_some_and(|s| s.attribute_key() == scene.attribute_key()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / assignments.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{caption_of, generate_scene, random_match_probability, vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words(s: &str) -> Vec<usize> {
        let v = vocabulary();
        s.split(' ').map(|w| v.iter().position(|x| *x == w).unwrap()).collect()
    }

    #[test]
    fn bleu_examples() {
        let r = words("a big red circle");
        let same = bleu(&r, &[&r], 4).unwrap();
        assert_eq!(same.bleu, [1.0; 4]);
        let h = words("a red circle");
        let b = bleu(&h, &[&r], 4).unwrap();
        assert!((b.brevity_penalty - 0.716_531_310_573_789_3).abs() < 1e-15);
        assert!((b.bleu[0] - 0.716_531_310_573_789_3).abs() < 1e-15);
        assert!((b.bleu[1] - 0.506_664_148_639_210_6).abs() < 1e-15);
        assert_eq!((b.bleu[2], b.bleu[3]), (0.0, 0.0));
        let none = bleu(&words("and and"), &[&r], 4).unwrap();
        assert_eq!(none.bleu, [0.0; 4]);
        assert_eq!(bleu(&[], &[&r], 4).unwrap().bleu, [0.0; 4]);
        assert!(bleu(&h, &[], 4).is_err());
        assert!(bleu(&h, &[&r], 5).is_err());
    }

    #[test]
    fn bleu_clips_and_ignores_reference_order() {
        let h = words("a a a a");
        let r1 = words("a red circle and a blue star");
        let r2 = words("a big circle");
        let b = bleu(&h, &[&r1, &r2], 1).unwrap();
        assert_eq!(b.precisions[0], 0.5);
        assert_eq!(b, bleu(&h, &[&r2, &r1], 1).unwrap());
        for hyp in [words("a red star"), words("a big red circle and a star")] {
            let x = bleu(&hyp, &[&r1, &r2], 4).unwrap();
            assert!(x.bleu.iter().chain(&x.precisions).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let (a, b) = (words("a red circle"), words("a big red circle"));
        let c = corpus_bleu(&[(&a, vec![&b[..]]), (&b, vec![&b[..]])], 2).unwrap();
        assert_eq!(c.precisions[0], 1.0);
        assert_eq!(c.precisions[1], 4.0 / 5.0);
        assert!((c.brevity_penalty - (1.0f64 - 8.0 / 7.0).exp()).abs() < 1e-15);
        assert_eq!(caption_words(&[1, 2, 7, 0]), &[2, 7]);
    }

    struct Hashed(u64);

    impl PairScorer for Hashed {
        fn score(&self, i: usize, c: usize) -> Result<f64> {
            let mut x = self.0 ^ ((i as u64) << 32 | c as u64);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            Ok(((x ^ (x >> 31)) >> 11) as f64 / (1u64 << 53) as f64)
        }
    }

    struct Perfect;

    impl PairScorer for Perfect {
        fn score(&self, i: usize, c: usize) -> Result<f64> {
            Ok(if i == c { 0.9 } else { 0.1 })
        }
    }

    #[test]
    fn recall_bounds() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(retrieval_recall(&Perfect, 50, 20, &[1, 5], &mut r).unwrap(), vec![1.0, 1.0]);
        let rec = retrieval_recall(&Hashed(1), 300, 300, &[1, 5, 10, 300], &mut r).unwrap();
        assert!(rec.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(rec[3], 1.0);
        assert!(retrieval_recall(&Perfect, 10, 11, &[1], &mut r).is_err());
        assert!(retrieval_recall(&Perfect, 10, 5, &[5, 1], &mut r).is_err());
    }

    #[test]
    fn random_scorer_recall_is_one_over_pool() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let n = 5000;
        let rec = retrieval_recall(&Hashed(9), n, 100, &[1], &mut r).unwrap()[0];
        let sigma = (0.01 * 0.99 / n as f64).sqrt();
        assert!((rec - 0.01).abs() < 3.0 * sigma, "{rec}");
    }

    #[test]
    fn pseudo_accuracy_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let scenes: Vec<Scene> = (0..40).map(|_| generate_scene(&mut r)).collect();
        let caps: Vec<ToyCaption> = scenes.iter().map(caption_of).collect();
        let truth: Vec<PseudoAssignment> = (0..40)
            .map(|i| PseudoAssignment { anchor: i, matched: i, confidence: 1.0, direction: Direction::ImageToCaption })
            .collect();
        assert_eq!(pseudo_accuracy(&truth, &scenes, &caps).unwrap(), 1.0);
        let back: Vec<_> = truth.iter().map(|a| PseudoAssignment { direction: Direction::CaptionToImage, ..*a }).collect();
        assert_eq!(pseudo_accuracy(&back, &scenes, &caps).unwrap(), 1.0);
        let bad = [PseudoAssignment { anchor: 0, matched: 99, confidence: 1.0, direction: Direction::ImageToCaption }];
        assert!(pseudo_accuracy(&bad, &scenes, &caps).is_err());
    }

    #[test]
    fn random_assignment_accuracy_matches_combinatorics() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let images: Vec<Scene> = (0..n).map(|_| generate_scene(&mut r)).collect();
        let caps: Vec<ToyCaption> = (0..n).map(|_| caption_of(&generate_scene(&mut r))).collect();
        let a: Vec<_> = (0..n)
            .map(|i| PseudoAssignment { anchor: i, matched: i, confidence: 0.5, direction: Direction::ImageToCaption })
            .collect();
        let acc = pseudo_accuracy(&a, &images, &caps).unwrap();
        let p = random_match_probability();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 4.0 * sigma, "{acc} vs {p}");
    }
}
