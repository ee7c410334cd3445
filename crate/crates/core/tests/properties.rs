use alref_core::audio_seg::{
    assign_labels, enumerate_combinations, segments_from_boundaries, AudioClip, AudioSegment,
};
use alref_core::backends::mock::{Script, ScriptedEmbedder};
use alref_core::eval::metrics::{boundary_f, region_j, tolerance_radius, MetricReport, ObjectScore};
use alref_core::lbru::SoundingCategorySet;
use alref_core::orchestrator::plan_clips;
use alref_core::types::{box_iou, mask_iou, BinaryMask, BoundingBox, MaskSequence, Reference};
use proptest::prelude::*;

fn arb_box(max: u32) -> impl Strategy<Value = BoundingBox> {
    (0..max, 0..max, 1..max, 1..max).prop_map(move |(x, y, w, h)| {
        let x1 = (x + w).min(max);
        let y1 = (y + h).min(max);
        BoundingBox::new(x, y, x1.max(x + 1), y1.max(y + 1), 0.5)
    })
}

fn arb_mask(max_side: u32) -> impl Strategy<Value = (u32, u32, Vec<bool>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), (h * w) as usize).prop_map(move |bits| (h, w, bits))
    })
}

/// Blobby shapes: union of a few random ellipses.
fn arb_shape_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    let ellipse = (0.0f64..1.0, 0.0f64..1.0, 0.02f64..0.4, 0.02f64..0.4);
    (
        8u32..=128,
        8u32..=128,
        proptest::collection::vec(ellipse.clone(), 0..4),
        proptest::collection::vec(ellipse, 0..4),
    )
        .prop_map(|(h, w, a, b)| (draw(h, w, &a), draw(h, w, &b)))
}

fn draw(h: u32, w: u32, ellipses: &[(f64, f64, f64, f64)]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| {
        ellipses.iter().any(|&(cx, cy, rx, ry)| {
            let dx = (f64::from(x) / f64::from(w) - cx) / rx;
            let dy = (f64::from(y) / f64::from(h) - cy) / ry;
            dx * dx + dy * dy <= 1.0
        })
    })
}

/// Boundary pixels, written from the definition: a pixel whose value differs
/// from its east, south or south-east neighbour, where neighbours outside the
/// raster are skipped for the last row and column and the corner has none.
fn oracle_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (w, h) = m.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = m.get(x, y);
            let mut neighbours = Vec::new();
            if x + 1 < w {
                neighbours.push((x + 1, y));
            }
            if y + 1 < h {
                neighbours.push((x, y + 1));
            }
            if x + 1 < w && y + 1 < h {
                neighbours.push((x + 1, y + 1));
            }
            if neighbours.iter().any(|&(nx, ny)| m.get(nx, ny) != v) {
                out.push((i64::from(x), i64::from(y)));
            }
        }
    }
    out
}

/// Boundary F by exhaustive pairwise distances.
fn oracle_f(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let (w, h) = gt.dims();
    let r = (0.008 * f64::from(w * w + h * h).sqrt()).ceil() as i64;
    let pb = oracle_boundary(pred);
    let gb = oracle_boundary(gt);
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let near = |p: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= r * r);
    let precision = pb.iter().filter(|p| near(p, &gb)).count() as f64 / pb.len() as f64;
    let recall = gb.iter().filter(|p| near(p, &pb)).count() as f64 / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn oracle_argmax(audio: &[Vec<f32>], text: &[Vec<f32>]) -> Vec<usize> {
    audio
        .iter()
        .map(|a| {
            let sims: Vec<f64> = text
                .iter()
                .map(|t| {
                    let dot: f64 = a.iter().zip(t).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                    let nt: f64 = t.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                    if na == 0.0 || nt == 0.0 {
                        0.0
                    } else {
                        dot / (na * nt)
                    }
                })
                .collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&s| s == best).unwrap() + 1
        })
        .collect()
}

fn run_assign(audio_vecs: &[Vec<f32>], text_vecs: &[Vec<f32>], n_cats: usize) -> Vec<usize> {
    let cats = SoundingCategorySet::from_names((0..n_cats).map(|i| format!("cat{i}"))).unwrap();
    let combos = enumerate_combinations(&cats).unwrap();
    assert_eq!(combos.len(), text_vecs.len());
    let secs = audio_vecs.len() as f64;
    let audio = AudioClip::new(vec![0.1; audio_vecs.len() * 100], 100).unwrap();
    let segments: Vec<AudioSegment> = (0..audio_vecs.len())
        .map(|i| AudioSegment {
            index: i,
            start: i as f64,
            end: (i + 1) as f64,
        })
        .collect();
    assert_eq!(segments.last().unwrap().end, secs);
    let embedder = ScriptedEmbedder::new(Script::sequence(audio_vecs.to_vec()), Script::sequence(text_vecs.to_vec()));
    let out = assign_labels(&audio, &segments, &combos, &embedder).unwrap();
    assert!(!out.degraded);
    out.labels
}

fn arb_embeddings() -> impl Strategy<Value = (usize, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    (1usize..=3, 1usize..=6, 2usize..=6).prop_flat_map(|(cats, segs, dim)| {
        let combos = (1 << cats) - 1;
        let v = proptest::collection::vec(-1.0f32..1.0, dim);
        (
            Just(cats),
            proptest::collection::vec(v.clone(), segs),
            proptest::collection::vec(v, combos),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn box_iou_symmetric_and_bounded(a in arb_box(40), b in arb_box(40)) {
        let ab = box_iou(&a, &b);
        prop_assert_eq!(ab, box_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
    }

    #[test]
    fn mask_iou_matches_pixel_counts((h, w, bits) in arb_mask(24), seed in any::<u64>()) {
        let a = BinaryMask::from_bits(h, w, bits.clone()).unwrap();
        let other: Vec<bool> = bits.iter().enumerate().map(|(i, &b)| b ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let b = BinaryMask::from_bits(h, w, other.clone()).unwrap();
        let inter = bits.iter().zip(&other).filter(|(x, y)| **x && **y).count();
        let union = bits.iter().zip(&other).filter(|(x, y)| **x || **y).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(mask_iou(&a, &b).unwrap(), want);
        prop_assert_eq!(mask_iou(&b, &a).unwrap(), want);
    }

    #[test]
    fn clip_plan_tiles_the_video(t in 1usize..400, fpc in 1usize..8, interval in 1usize..16) {
        let plan = plan_clips(t, fpc, interval).unwrap();
        prop_assert_eq!(plan.clips[0].start, 0);
        prop_assert_eq!(plan.clips.last().unwrap().end, t);
        for pair in plan.clips.windows(2) {
            prop_assert_eq!(pair[0].end, pair[1].start);
        }
        let mut all = Vec::new();
        for c in &plan.clips {
            prop_assert!(c.start < c.end);
            prop_assert!(!c.sampled.is_empty() && c.sampled.len() <= fpc);
            prop_assert!(c.sampled.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(c.sampled.iter().all(|&i| i >= c.start && i < c.end));
            all.extend(c.sampled.iter().copied());
        }
        let n = all.len();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert!(plan.middle() < plan.clips.len());
    }

    #[test]
    fn assignment_is_the_argmax_of_cosine_similarity((cats, audio, text) in arb_embeddings()) {
        prop_assert_eq!(run_assign(&audio, &text, cats), oracle_argmax(&audio, &text));
    }

    #[test]
    fn positive_scaling_never_changes_labels((cats, audio, text) in arb_embeddings(), pick in any::<usize>(), scale in 0.01f32..100.0) {
        let base = run_assign(&audio, &text, cats);
        let mut scaled = audio.clone();
        let i = pick % scaled.len();
        scaled[i].iter_mut().for_each(|x| *x *= scale);
        prop_assert_eq!(run_assign(&scaled, &text, cats), base);
    }

    #[test]
    fn segments_cover_the_clip(duration in 0.5f64..30.0, cuts in proptest::collection::vec(-5.0f64..35.0, 0..12)) {
        let segs = segments_from_boundaries(duration, &cuts, 0.2);
        prop_assert_eq!(segs[0].start, 0.0);
        prop_assert_eq!(segs.last().unwrap().end, duration);
        for (i, pair) in segs.windows(2).enumerate() {
            prop_assert_eq!(pair[0].end, pair[1].start);
            prop_assert_eq!(pair[0].index, i);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contour_f_matches_exhaustive_matcher((pred, gt) in arb_shape_pair()) {
        let got = boundary_f(&pred, &gt).unwrap();
        let want = oracle_f(&pred, &gt);
        prop_assert!((got - want).abs() <= 1e-9, "got {} want {}", got, want);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn region_j_is_mean_pixel_iou(frames in proptest::collection::vec(arb_shape_pair(), 1..4)) {
        // align sizes to the first pair so the sequences are well-formed
        let (h, w) = (frames[0].0.height(), frames[0].0.width());
        let (pred, gt): (Vec<BinaryMask>, Vec<BinaryMask>) = frames
            .into_iter()
            .map(|(a, b)| {
                let crop = |m: &BinaryMask| BinaryMask::from_fn(h, w, |x, y| x < m.width() && y < m.height() && m.get(x, y));
                (crop(&a), crop(&b))
            })
            .unzip();
        let want: f64 = pred
            .iter()
            .zip(&gt)
            .map(|(p, g)| {
                let inter = p.bits().iter().zip(g.bits()).filter(|(a, b)| **a && **b).count();
                let union = p.bits().iter().zip(g.bits()).filter(|(a, b)| **a || **b).count();
                if union == 0 { 1.0 } else { inter as f64 / union as f64 }
            })
            .sum::<f64>() / pred.len() as f64;
        prop_assert_eq!(region_j(&pred, &gt).unwrap(), want);
    }

    #[test]
    fn filter_silent_is_idempotent(silent in proptest::collection::vec(any::<bool>(), 1..12)) {
        let r = Reference::text("the dog").unwrap();
        let n = silent.len();
        let mut seq = MaskSequence::new(vec![BinaryMask::from_fn(4, 4, |x, _| x < 2); n], r);
        seq.filter_silent(&silent).unwrap();
        let once = seq.clone();
        seq.filter_silent(&silent).unwrap();
        prop_assert_eq!(&seq, &once);
        for (m, &s) in seq.masks.iter().zip(&silent) {
            prop_assert_eq!(m.is_empty(), s);
        }
    }

    #[test]
    fn report_means_stay_in_range(js in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20)) {
        let objects = js
            .iter()
            .enumerate()
            .map(|(i, &(j, f))| ObjectScore { id: i.to_string(), group: Some((i % 3).to_string()), frames: 1, j, f })
            .collect();
        let r = MetricReport::from_objects(objects, true).unwrap();
        prop_assert_eq!(r.jf, (r.j + r.f) / 2.0);
        prop_assert!((0.0..=1.0).contains(&r.j) && (0.0..=1.0).contains(&r.f));
    }
}

#[test]
fn tolerance_radius_examples() {
    // ceil(0.008 * 100) for a 60x80 frame, ceil(0.008 * 1468.6) at 1280x720
    assert_eq!(tolerance_radius(80, 60), 1);
    assert_eq!(tolerance_radius(1280, 720), 12);
}
