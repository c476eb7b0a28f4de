use liir::affinity::{
    intra_affinity, intra_inter_affinity, intra_inter_on_tape, logits_on_tape, AffinityKind, AffinityMatrix, NegativeSet,
};
use liir::compactness::{compact_row, compactness_loss, fit_mixture, filter_affinity, Heatmap};
use liir::diff::{Tape, Tensor};
use liir::encoder::FeatureMap;
use liir::metrics::Mask;
use liir::position::{build_learnable, shift, shuffle, PositionKind, PositionMap, ShiftMode};
use liir::propagation::{propagate_features, reference_schedule, LabelMap, PropagationOptions};
use liir::reconstruction::{reconstruct, reconstruct_on_tape, rms_on_tape};
use liir::{ColorSpace, Error, Frame};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn features(rng: &mut StdRng, h: usize, w: usize, c: usize, scale: f64) -> FeatureMap {
    let rows: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-scale..scale)).collect();
    FeatureMap::from_rows(h, w, c, &rows).unwrap()
}

fn negatives(rng: &mut StdRng, k: usize, c: usize, scale: f64) -> NegativeSet {
    let mut n = NegativeSet::new(c);
    for i in 0..k {
        let v: Vec<f64> = (0..c).map(|_| rng.random_range(-scale..scale)).collect();
        n.push(&v, i + 1).unwrap();
    }
    n
}

fn frame(rng: &mut StdRng, h: usize, w: usize) -> Frame {
    Frame::new(h, w, ColorSpace::Lab, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

/// `(x, y)` of the cell `(x + dx, y + dy)` with wrap-around.
fn wrap(x: usize, y: usize, dx: usize, dy: usize, w: usize, h: usize) -> (usize, usize) {
    ((x + dx) % w, (y + dy) % h)
}

/// True when every pair of horizontally or vertically adjacent cells of `out`
/// is also adjacent (with wrap-around, in the same direction) in `src`.
fn keeps_adjacency(src: &PositionMap, out: &PositionMap) -> bool {
    let (w, h) = (src.width(), src.height());
    let locate = |v: &[f64]| -> (usize, usize) {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .find(|&(x, y)| src.cell(x, y) == v)
            .expect("cell present")
    };
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).all(|(x, y)| {
        let here = locate(&out.cell(x, y));
        let (rx, ry) = wrap(x, y, 1, 0, w, h);
        let (bx, by) = wrap(x, y, 0, 1, w, h);
        locate(&out.cell(rx, ry)) == wrap(here.0, here.1, 1, 0, w, h)
            && locate(&out.cell(bx, by)) == wrap(here.0, here.1, 0, 1, w, h)
    })
}

fn distinct_map(rng: &mut StdRng, h: usize, w: usize, c: usize) -> PositionMap {
    let values = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    PositionMap::new(PositionKind::Absolute1D, h, w, c, values).unwrap()
}

fn sorted_cells(p: &PositionMap) -> Vec<Vec<u64>> {
    let mut cells: Vec<Vec<u64>> = (0..p.height())
        .flat_map(|y| (0..p.width()).map(move |x| (x, y)))
        .map(|(x, y)| p.cell(x, y).iter().map(|v| v.to_bits()).collect())
        .collect();
    cells.sort();
    cells
}

fn top_mass(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / v.iter().sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn intra_rows_are_distributions(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, c in 1usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = intra_affinity(&features(&mut rng, h, w, c, 3.0), &features(&mut rng, h, w, c, 3.0), None).unwrap();
        for s in a.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn negatives_rescale_rows_uniformly_and_strictly_shrink_them(
        seed in any::<u64>(), h in 1usize..5, w in 1usize..5, c in 1usize..6, k in 1usize..6,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let fq = features(&mut rng, h, w, c, 2.0);
        let fr = features(&mut rng, h, w, c, 2.0);
        let a = intra_affinity(&fq, &fr, None).unwrap();
        let empty = intra_inter_affinity(&fq, &fr, &NegativeSet::new(c)).unwrap();
        for (x, y) in a.values.iter().zip(&empty.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let mut prev = empty.row_sums();
        let all = negatives(&mut rng, k, c, 2.0);
        for m in 1..=k {
            let mut some = NegativeSet::new(c);
            for j in 0..m {
                some.push(all.vector(j), j + 1).unwrap();
            }
            let b = intra_inter_affinity(&fq, &fr, &some).unwrap();
            let sums = b.row_sums();
            for (s, p) in sums.iter().zip(&prev) {
                prop_assert!(*s > 0.0 && s < p, "row sum {s} not below {p}");
            }
            // ratios between intra entries are those of the plain softmax
            for i in 0..b.rows {
                for j in 0..b.cols() {
                    let r = b.get(i, j) / sums[i];
                    prop_assert!((r - a.get(i, j)).abs() < 1e-12 * (1.0 + a.get(i, j)));
                }
            }
            prev = sums;
        }
    }

    #[test]
    fn a_shared_offset_in_every_dot_product_leaves_rows_unchanged(
        seed in any::<u64>(), h in 1usize..4, w in 1usize..4, c in 1usize..5, k in 0usize..4, offset in -5.0f64..5.0,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let fq = features(&mut rng, h, w, c, 2.0);
        let fr = features(&mut rng, h, w, c, 2.0);
        let neg = negatives(&mut rng, k, c, 2.0);
        // an extra channel holding `offset` for queries and 1 elsewhere adds
        // `offset` to every dot product
        let extend = |f: &FeatureMap, v: f64| {
            let rows: Vec<f64> = (0..f.pixels()).flat_map(|p| f.vector(p).into_iter().chain([v])).collect();
            FeatureMap::from_rows(f.height, f.width, c + 1, &rows).unwrap()
        };
        let mut neg2 = NegativeSet::new(c + 1);
        for j in 0..k {
            let v: Vec<f64> = neg.vector(j).iter().copied().chain([1.0]).collect();
            neg2.push(&v, j + 1).unwrap();
        }
        let a = intra_inter_affinity(&fq, &fr, &neg).unwrap();
        let b = intra_inter_affinity(&extend(&fq, offset), &extend(&fr, 1.0), &neg2).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn windowed_rows_vanish_outside_the_window(
        seed in any::<u64>(), h in 1usize..7, w in 1usize..7, r in 0usize..3,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = intra_affinity(&features(&mut rng, h, w, 3, 2.0), &features(&mut rng, h, w, 3, 2.0), Some(r)).unwrap();
        for i in 0..a.rows {
            let (qx, qy) = (i % w, i / w);
            for j in 0..a.cols() {
                let (rx, ry) = (j % w, j / w);
                if qx.abs_diff(rx).max(qy.abs_diff(ry)) > r {
                    prop_assert_eq!(a.get(i, j), 0.0);
                }
            }
            prop_assert!((a.row_sums()[i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_is_linear_in_the_reference(
        seed in any::<u64>(), h in 1usize..5, w in 1usize..5, alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = intra_affinity(&features(&mut rng, h, w, 3, 2.0), &features(&mut rng, h, w, 3, 2.0), None).unwrap();
        let (r1, r2) = (frame(&mut rng, h, w), frame(&mut rng, h, w));
        let mix: Vec<f64> = r1.data().iter().zip(r2.data()).map(|(x, y)| alpha * x + beta * y).collect();
        let mixed = reconstruct(&a, &Frame::new(h, w, ColorSpace::Lab, mix).unwrap()).unwrap();
        let (o1, o2) = (reconstruct(&a, &r1).unwrap(), reconstruct(&a, &r2).unwrap());
        for ((m, x), y) in mixed.data().iter().zip(o1.data()).zip(o2.data()) {
            prop_assert!((m - (alpha * x + beta * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn shifts_preserve_cells_and_adjacency(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = distinct_map(&mut rng, h, w, 4);
        let (dx, dy) = (rng.random_range(0..w), rng.random_range(0..h));
        let s = shift(&p, dx, dy).unwrap();
        prop_assert_eq!(sorted_cells(&s), sorted_cells(&p));
        prop_assert!(keeps_adjacency(&p, &s));
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(s.cell(x, y), p.cell((x + w - dx) % w, (y + h - dy) % h));
            }
        }
        let back = shift(&s, (w - dx) % w, (h - dy) % h).unwrap();
        prop_assert_eq!(back.values(), p.values());
        let same = shift(&p, 0, 0).unwrap();
        prop_assert_eq!(same.values(), p.values());
        prop_assert!(matches!(shift(&p, w, 0), Err(Error::Range(_))));
        prop_assert!(matches!(shift(&p, 0, h), Err(Error::Range(_))));
    }

    #[test]
    fn shuffling_preserves_cells_but_not_adjacency(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = distinct_map(&mut rng, 6, 6, 4);
        let s = shuffle(&p, &mut rng);
        prop_assert_eq!(sorted_cells(&s), sorted_cells(&p));
        // a uniformly random permutation of 36 cells keeps the layout with
        // probability far below 1e-30
        prop_assert!(!keeps_adjacency(&p, &s));
    }

    #[test]
    fn modulated_learnable_maps_receive_no_gradient(
        seed in any::<u64>(), two_d in any::<bool>(), mode_pick in 0usize..3,
    ) {
        let kind = if two_d { PositionKind::Absolute2D } else { PositionKind::Absolute1D };
        let mode = [ShiftMode::Shift, ShiftMode::Shuffle, ShiftMode::None][mode_pick];
        let enc = build_learnable(kind, 4, 5, 8, seed).unwrap();
        let mut rng = StdRng::seed_from_u64(seed);
        let weights = Tensor::new(vec![8, 4, 5], (0..160).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let grads = |with_negative: bool, rng: &mut StdRng| {
            let mut t = Tape::new();
            let vars: Vec<_> = enc.params().iter().map(|p| t.leaf(p.clone(), true).unwrap()).collect();
            let wv = t.constant(weights.clone()).unwrap();
            let pos = enc.on_tape(&mut t, &vars).unwrap();
            let mut total = t.mul(pos, wv).unwrap();
            if with_negative {
                let neg = enc.negative_on_tape(&mut t, &vars, mode, rng).unwrap();
                let e = t.exp(neg).unwrap();
                let m = t.mul(e, wv).unwrap();
                total = t.add(total, m).unwrap();
            }
            let l = t.sum(total).unwrap();
            t.backward(l).unwrap();
            vars.iter().map(|v| t.grad(*v).unwrap().into_values()).collect::<Vec<_>>()
        };
        prop_assert_eq!(grads(true, &mut rng), grads(false, &mut rng));
    }

    #[test]
    fn mixture_means_follow_the_top_entries(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (h, w) = (8, 8);
        let mut values: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..0.5)).collect();
        let (a, b) = (rng.random_range(0..h * w), rng.random_range(0..h * w));
        prop_assume!(a != b);
        values[a] = 2.0;
        values[b] = 1.5;
        let means = |v: &[f64]| -> Vec<(f64, f64)> {
            fit_mixture(&Heatmap::new(h, w, v.to_vec()).unwrap(), 2)
                .unwrap()
                .components
                .iter()
                .map(|g| (g.mean_x, g.mean_y))
                .collect()
        };
        let before = means(&values);
        prop_assert_eq!(&before, &vec![((a % w) as f64, (a / w) as f64), ((b % w) as f64, (b / w) as f64)]);
        for (i, v) in values.iter_mut().enumerate() {
            if i != a && i != b {
                *v = rng.random_range(0.0..1.0);
            }
        }
        prop_assert_eq!(means(&values), before);
    }

    #[test]
    fn sparse_rows_compact_into_few_pixels(seed in any::<u64>()) {
        // rows whose mass sits on at most two points fit at the variance floor
        let mut rng = StdRng::seed_from_u64(seed);
        let (h, w) = (32, 32);
        let mut row = vec![0.0; h * w];
        for _ in 0..rng.random_range(1..3) {
            row[rng.random_range(0..h * w)] += rng.random_range(0.1..1.0);
        }
        let c = compact_row(&row, h, w, 2, 0.5);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(top_mass(&c, (0.05 * (h * w) as f64).ceil() as usize) >= 0.9);
    }

    #[test]
    fn compact_rows_are_fixed_points_of_the_loss_only_when_compact(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (h, w) = (6, 6);
        let mut row = vec![0.0; h * w];
        row[rng.random_range(0..h * w)] = 1.0;
        let target = compact_row(&row, h, w, 2, 0.5);
        let fixed = AffinityMatrix::new(AffinityKind::Intra, 1, h, w, target.clone()).unwrap();
        // a row equal to its own compact target; refitting moves it by rounding only
        let refit = compact_row(&target, h, w, 2, 0.5);
        let loss = compactness_loss(&fixed, 2).unwrap();
        let gap: f64 = refit.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((loss - gap).abs() < 1e-12);
        let uniform = AffinityMatrix::new(AffinityKind::Intra, 1, h, w, vec![1.0 / 36.0; 36]).unwrap();
        prop_assert!(compactness_loss(&uniform, 2).unwrap() > 0.0);
    }

    #[test]
    fn schedule_is_monotone_and_keeps_the_previous_frame(t in 1usize..500) {
        let s = reference_schedule(t);
        prop_assert!(s.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(*s.last().unwrap(), t - 1);
        prop_assert!(s.iter().all(|&r| r < t));
        // short-term references advance with t; long-term ones stay put
        let next = reference_schedule(t + 1);
        prop_assert!(next.last() > s.last());
        if t >= 11 {
            prop_assert_eq!(next, vec![0, 5, t - 4, t - 2, t]);
        }
    }

    #[test]
    fn propagated_labels_stay_distributions(seed in any::<u64>(), compact in any::<bool>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let (h, w, k) = (4, 4, 3);
        let feats: Vec<FeatureMap> = (0..6).map(|_| features(&mut rng, h, w, 5, 3.0)).collect();
        let mut values: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(0.0..1.0)).collect();
        for px in values.chunks_mut(k) {
            let s: f64 = px.iter().sum();
            px.iter_mut().for_each(|v| *v /= s);
        }
        let first = LabelMap::new(h, w, k, values).unwrap();
        let opts = PropagationOptions { compact, window: Some(1), ..Default::default() };
        for l in propagate_features(&feats, first, &opts).unwrap() {
            for p in 0..l.pixels() {
                prop_assert!(l.dist(p).iter().all(|&v| v >= 0.0));
                prop_assert!((l.dist(p).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn loss_gradient_reaches_negatives_through_the_denominator() {
    // two pixels, query == reference, one negative aligned with pixel 0
    let mut t = Tape::new();
    let q = t.leaf(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 3.0]).unwrap(), true).unwrap();
    let r = t.constant(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 3.0]).unwrap()).unwrap();
    let n = t.leaf(Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap(), true).unwrap();
    let colors = Tensor::new(vec![2, 3], vec![0.9, 0.2, 0.4, 0.1, 0.8, 0.6]).unwrap();
    let c = t.constant(colors.clone()).unwrap();
    let logits = logits_on_tape(&mut t, q, r).unwrap();
    let a = intra_inter_on_tape(&mut t, q, logits, Some(n)).unwrap();
    let recon = reconstruct_on_tape(&mut t, a, c).unwrap();
    let target = t.constant(colors).unwrap();
    let loss = rms_on_tape(&mut t, recon, target).unwrap();
    t.backward(loss).unwrap();
    // the negative never enters the weighted sum, yet it receives gradient
    let g = t.grad(n).unwrap();
    assert!(g.values().iter().any(|v| v.abs() > 1e-3), "{:?}", g.values());

    // the same mechanism on explicit logits: raising the negative's dot
    // product drains intra mass and raises the loss
    let mut t = Tape::new();
    let intra = t.leaf(Tensor::new(vec![2, 2], vec![9.0, 0.0, 0.0, 9.0]).unwrap(), true).unwrap();
    let neg = t.leaf(Tensor::new(vec![2, 1], vec![9.0, 0.0]).unwrap(), true).unwrap();
    let all = t.concat_cols(intra, neg).unwrap();
    let soft = t.softmax(all).unwrap();
    let a = t.slice_cols(soft, 0, 2).unwrap();
    let c = t.constant(Tensor::new(vec![2, 3], vec![0.9, 0.2, 0.4, 0.1, 0.8, 0.6]).unwrap()).unwrap();
    let recon = t.matmul(a, c).unwrap();
    let loss = rms_on_tape(&mut t, recon, c).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(neg).unwrap();
    assert!(g.values()[0] > 1e-3, "{:?}", g.values());
    assert!(g.values()[1] > 0.0);
}

#[test]
fn static_video_reproduces_the_first_mask() {
    let mut rng = StdRng::seed_from_u64(5);
    let (h, w, stride) = (8, 8, 4);
    // one distinct strongly scaled feature per cell, shared by every frame
    let f = features(&mut rng, h, w, 16, 1.0);
    let rows: Vec<f64> = (0..f.pixels())
        .flat_map(|p| {
            let v = f.vector(p);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(move |x| 100.0 * x / n)
        })
        .collect();
    let f = FeatureMap::from_rows(h, w, 16, &rows).unwrap();
    let mut mask = Mask::zeros(h * stride, w * stride);
    for y in 8..20 {
        for x in 4..16 {
            mask.set(x, y, 1);
        }
    }
    for y in 20..28 {
        for x in 16..32 {
            mask.set(x, y, 2);
        }
    }
    let first = LabelMap::from_mask(&mask, 3, stride).unwrap();
    let opts = PropagationOptions { compact: false, bilinear: false, ..Default::default() };
    let labels = propagate_features(&vec![f.clone(); 12], first.clone(), &opts).unwrap();
    for l in &labels[1..] {
        assert_eq!(l.argmax().upsample_nearest(h * stride, w * stride), mask);
    }
    // the compact filter spreads every row over a floor-width Gaussian
    // (about a third of the mass on the centre), so convex corners erode
    let opts = PropagationOptions { compact: true, bilinear: false, ..Default::default() };
    let labels = propagate_features(&vec![f; 12], first, &opts).unwrap();
    let last = labels.last().unwrap().argmax().upsample_nearest(h * stride, w * stride);
    assert_ne!(last, mask);
    assert!(last.labels.iter().zip(&mask.labels).all(|(p, g)| p == g || *p == 0));
}

#[test]
fn filtering_keeps_rows_stochastic() {
    let mut rng = StdRng::seed_from_u64(3);
    let a = intra_affinity(&features(&mut rng, 5, 5, 4, 3.0), &features(&mut rng, 5, 5, 4, 3.0), Some(2)).unwrap();
    let f = filter_affinity(&a, 2);
    for s in f.row_sums() {
        assert!((s - 1.0).abs() < 1e-9);
    }
}
