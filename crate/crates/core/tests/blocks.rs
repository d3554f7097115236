use irdet_core::ddc::{ddc_ablate, DdcBlock, DdcBranches};
use irdet_core::lsff::{channel_pool, LsffBlock};
use irdet_core::params::ParamBuilder;
use irdet_core::serank::{
    build_pos_table, compute_k, effective_k, gather_positions, topk_select, SeRankBlock, SelectedFeatures,
};
use irdet_core::{ParamStore, Session};
use irdet_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn ddc(branches: DdcBranches, c_in: usize, c_out: usize, seed: u64) -> (ParamStore<f64>, DdcBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = DdcBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), c_in, c_out, [2, 4, 2], branches).unwrap();
    (store, block)
}

fn run_ddc(store: &ParamStore<f64>, block: &DdcBlock, x: &Tensor<f64>, training: bool) -> Tensor<f64> {
    let tape = Tape::new();
    let s = Session::new(&tape, store, training, false);
    block.forward(&s, tape.constant(x.clone())).unwrap().value().as_ref().clone()
}

#[test]
fn ddc_preserves_spatial_shape() {
    let (store, block) = ddc(DdcBranches::FULL, 64, 64, 0);
    let x = Tensor::<f64>::zeros(&[1, 64, 32, 32]);
    assert_eq!(run_ddc(&store, &block, &x, false).shape(), &[1, 64, 32, 32]);
    let (store, block) = ddc(DdcBranches::FULL, 3, 5, 0);
    for (h, w) in [(9, 9), (10, 13), (16, 11)] {
        let x = Tensor::<f64>::zeros(&[2, 3, h, w]);
        assert_eq!(run_ddc(&store, &block, &x, true).shape(), &[2, 5, h, w]);
    }
}

#[test]
fn ddc_branch_toggles_resize_the_merge() {
    for (branches, groups) in [
        (DdcBranches::PLAIN, 1),
        (DdcBranches::CENTRAL_DIFFERENCE, 2),
        (DdcBranches::DILATED, 2),
        (DdcBranches::FULL, 3),
    ] {
        let (store, block) = ddc(branches, 2, 4, 1);
        assert_eq!(store.get(block.merge.weight).shape(), &[4, 4 * groups, 1, 1]);
        assert_eq!(block.branches(), branches);
    }
    let none = DdcBranches {
        standard: false,
        central_difference: false,
        dilated: false,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(DdcBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 2, 4, [2, 4, 2], none).is_err());
    let (mut store, block) = ddc(DdcBranches::FULL, 2, 4, 1);
    assert!(ddc_ablate(&block, none, &mut store).is_err());
}

#[test]
fn ablated_block_equals_full_block_with_zeroed_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut store, block) = ddc(DdcBranches::FULL, 2, 3, 2);
    // Zero the merge columns that read the difference and dilated branches.
    let mut w = store.get(block.merge.weight).clone();
    for o in 0..3 {
        for i in 3..9 {
            w.data_mut()[o * 9 + i] = 0.0;
        }
    }
    store.set(block.merge.weight, w).unwrap();
    let plain = ddc_ablate(&block, DdcBranches::PLAIN, &mut store).unwrap();
    assert_eq!(plain.branches(), DdcBranches::PLAIN);
    let x = random(&[2, 2, 10, 10], &mut rng);
    for training in [true, false] {
        let full = run_ddc(&store, &block, &x, training);
        let cut = run_ddc(&store, &plain, &x, training);
        let worst = full.data().iter().zip(cut.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-12, "{worst}");
    }
}

#[test]
fn ablation_keeps_surviving_merge_columns() {
    let (mut store, block) = ddc(DdcBranches::FULL, 2, 3, 4);
    let old = store.get(block.merge.weight).clone();
    let cut = ddc_ablate(&block, DdcBranches::DILATED, &mut store).unwrap();
    let new = store.get(cut.merge.weight);
    assert_eq!(new.shape(), &[3, 6, 1, 1]);
    for o in 0..3 {
        assert_eq!(&new.data()[o * 6..o * 6 + 3], &old.data()[o * 9..o * 9 + 3]);
        assert_eq!(&new.data()[o * 6 + 3..o * 6 + 6], &old.data()[o * 9 + 6..o * 9 + 9]);
    }
}

#[test]
fn difference_branch_is_silent_on_constant_input() {
    let (store, block) = ddc(DdcBranches::FULL, 2, 3, 5);
    let x = Tensor::<f64>::full(&[1, 2, 12, 12], 0.7);
    for training in [true, false] {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, training, false);
        let parts = block.branch_outputs(&s, tape.constant(x.clone())).unwrap();
        assert!(parts[1].value().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dilated_chain_receptive_field_is_17() {
    let (store, block) = ddc(
        DdcBranches {
            standard: false,
            central_difference: false,
            dilated: true,
        },
        1,
        2,
        6,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 1, 21, 21], &mut rng);
    let dilated = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false, false);
        let parts = block.branch_outputs(&s, tape.constant(x.clone())).unwrap();
        parts[0].value().as_ref().clone()
    };
    let base = dilated(&x);
    let (cy, cx) = (10usize, 10usize);
    let at = |t: &Tensor<f64>| (0..2).map(|c| t.data()[(c * 21 + cy) * 21 + cx]).collect::<Vec<_>>();
    let mut reached = 0;
    for y in 0..21usize {
        for xx in 0..21usize {
            let mut p = x.clone();
            p.data_mut()[y * 21 + xx] += 1.0;
            let changed = at(&dilated(&p)) != at(&base);
            let cheb = y.abs_diff(cy).max(xx.abs_diff(cx));
            if cheb >= 9 {
                assert!(!changed, "pixel ({y}, {xx}) at distance {cheb} reached the centre");
            }
            if changed {
                reached = reached.max(cheb);
            }
        }
    }
    assert_eq!(reached, 8);
}

#[test]
fn k_schedule_per_stage() {
    let ks: Vec<usize> = [64, 128, 256, 512, 1024]
        .iter()
        .enumerate()
        .map(|(i, &c)| compute_k(c, 3, i + 1))
        .collect();
    assert_eq!(ks, vec![512, 256, 128, 64, 32]);
    assert_eq!(effective_k(512, 16, 16), 256);
    assert_eq!(effective_k(32, 16, 16), 32);
    assert_eq!(effective_k(4, 1, 2), 2);
}

#[test]
fn topk_hand_cases() {
    let x = Tensor::new(&[1, 2, 2], vec![3.0f64, 1.0, 4.0, 2.0]).unwrap();
    let sel = topk_select(&x, 2).unwrap();
    assert_eq!(sel.values.data(), &[4.0, 3.0]);
    assert_eq!(sel.coords, vec![(1, 0), (0, 0)]);

    let full = topk_select(&x, 4).unwrap();
    assert_eq!(full.values.data(), &[4.0, 3.0, 2.0, 1.0]);

    let flat = Tensor::full(&[1, 2, 2], 5.0f64);
    let sel = topk_select(&flat, 2).unwrap();
    assert_eq!(sel.values.data(), &[5.0, 5.0]);
    assert_eq!(sel.coords, vec![(0, 0), (0, 1)]);

    assert!(topk_select(&x, 0).is_err());
    assert!(topk_select(&x, 5).is_err());
}

/// Full stable sort by (value descending, index ascending), then truncate.
fn sort_oracle(x: &Tensor<f64>, k: usize) -> SelectedFeatures<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut values = Vec::new();
    let mut coords = Vec::new();
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mut idx: Vec<usize> = (0..h * w).collect();
        idx.sort_by(|&a, &b| plane[b].partial_cmp(&plane[a]).unwrap());
        for &i in &idx[..k] {
            values.push(plane[i]);
            coords.push((i / w, i % w));
        }
    }
    SelectedFeatures {
        values: Tensor::new(&[c, k], values).unwrap(),
        coords,
        k,
    }
}

proptest! {
    #[test]
    fn topk_matches_sort_oracle(c in 1usize..4, h in 1usize..7, w in 1usize..7, levels in 1u32..6, seed in any::<u64>(), kf in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few distinct levels force plenty of ties.
        let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(0..levels) as f64);
        let k = 1 + (kf * (h * w - 1) as f64) as usize;
        prop_assert_eq!(topk_select(&x, k).unwrap(), sort_oracle(&x, k));
    }

    #[test]
    fn selection_invariants(c in 1usize..4, h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng);
        let k = (h * w).div_ceil(2);
        let sel = topk_select(&x, k).unwrap();
        for ch in 0..c {
            let row = &sel.values.data()[ch * k..(ch + 1) * k];
            prop_assert!(row.windows(2).all(|p| p[0] >= p[1]));
            let max = x.data()[ch * h * w..(ch + 1) * h * w].iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(row[0], max);
            let mut cs = sel.coords[ch * k..(ch + 1) * k].to_vec();
            cs.sort();
            cs.dedup();
            prop_assert_eq!(cs.len(), k);
        }
    }

    #[test]
    fn selection_follows_spatial_permutation(h in 2usize..6, w in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, h, w], &mut rng);
        // Transpose-free permutation: flip both axes.
        let flipped = Tensor::from_fn(&[2, h, w], |i| {
            let (c, r, col) = (i / (h * w), (i / w) % h, i % w);
            x.data()[(c * h + (h - 1 - r)) * w + (w - 1 - col)]
        });
        let k = h * w / 2;
        let a = topk_select(&x, k).unwrap();
        let b = topk_select(&flipped, k).unwrap();
        prop_assert_eq!(&a.values, &b.values);
        let mapped: Vec<_> = a.coords.iter().map(|&(r, c)| (h - 1 - r, w - 1 - c)).collect();
        prop_assert_eq!(mapped, b.coords);
    }

    #[test]
    fn positional_codes_are_bounded(h in 1usize..20, w in 2usize..20) {
        let pos = build_pos_table::<f64>(h, w).unwrap();
        prop_assert!(pos.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for r in 0..h {
            prop_assert_eq!(pos.table.data()[r * w], 0.0);
        }
    }

    #[test]
    fn fusion_is_a_convex_combination(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let block = LsffBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 7).unwrap();
        let enc = random(&[2, 3, 6, 5], &mut rng).map(|v| 10.0 * v);
        let dec = random(&[2, 3, 6, 5], &mut rng);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let y = block.forward(&s, tape.constant(enc.clone()), tape.constant(dec.clone())).unwrap().value();
        for ((&y, &a), &b) in y.data().iter().zip(enc.data()).zip(dec.data()) {
            prop_assert!(y >= a.min(b) && y <= a.max(b));
        }
    }
}

#[test]
fn positional_table_hand_values() {
    let pos = build_pos_table::<f64>(4, 4).unwrap();
    let e = pos.table.data();
    assert_eq!(&e[..4], &[0.0, 1.0, 0.0, 1.0]);
    assert!((e[4 + 2] - 0.2f64.sin()).abs() < 1e-12);
    assert!((e[4 + 2] - 0.198669).abs() < 1e-6);
    assert!(build_pos_table::<f64>(4, 1).is_err());

    let sel = SelectedFeatures {
        values: Tensor::new(&[1, 1], vec![0.5]).unwrap(),
        coords: vec![(1, 2)],
        k: 1,
    };
    assert!((gather_positions(&sel, &pos).unwrap().data()[0] - 0.2f64.sin()).abs() < 1e-12);
    let origin = SelectedFeatures {
        values: Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        coords: vec![(0, 0); 4],
        k: 2,
    };
    assert!(gather_positions(&origin, &pos).unwrap().data().iter().all(|&v| v == 0.0));
    let outside = SelectedFeatures {
        coords: vec![(4, 0)],
        ..sel
    };
    assert!(gather_positions(&outside, &pos).is_err());
}

fn serank(channels: usize, offset: i32, stage: usize, seed: u64) -> (ParamStore<f64>, SeRankBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = SeRankBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), channels, offset, stage, true).unwrap();
    (store, block)
}

fn run_serank(store: &ParamStore<f64>, block: &SeRankBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let s = Session::inference(&tape, store);
    block.forward(&s, tape.constant(x.clone())).unwrap().value().as_ref().clone()
}

#[test]
fn serank_projection_shapes() {
    let (store, block) = serank(64, 3, 1, 0);
    assert_eq!(block.k, 512);
    assert_eq!(store.get(block.w_q).shape(), &[512, 1024]);
    assert_eq!(store.get(block.w_k).shape(), &[512, 1024]);
}

#[test]
fn zero_projections_add_the_channel_mean() {
    let (mut store, block) = serank(4, 0, 1, 1);
    for id in [block.w_q, block.w_k] {
        let z = Tensor::zeros(store.get(id).shape());
        store.set(id, z).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 4, 5, 5], &mut rng);
    let y = run_serank(&store, &block, &x);
    for b in 0..2 {
        for p in 0..25 {
            let mean: f64 = (0..4).map(|c| x.data()[(b * 4 + c) * 25 + p]).sum::<f64>() / 4.0;
            for c in 0..4 {
                let i = (b * 4 + c) * 25 + p;
                assert!((y.data()[i] - (x.data()[i] + mean)).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn single_channel_doubles_input() {
    let (store, block) = serank(1, 2, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 1, 4, 4], &mut rng);
    let y = run_serank(&store, &block, &x);
    assert_eq!(y, x.map(|v| 2.0 * v));
}

#[test]
fn residual_equals_attention_times_input() {
    use irdet_core::serank::{attention_core, topk_gather};
    let (store, block) = serank(6, 1, 1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 6, 4, 5], &mut rng);
    let y = run_serank(&store, &block, &x);

    // Recompute the attention matrix independently of the block.
    let tape = Tape::new();
    let xb = tape.constant(x.clone().reshape(&[6, 4, 5]).unwrap());
    let k = effective_k(block.k, 4, 5);
    let (f, sel) = topk_gather(xb, k).unwrap();
    let pos = tape.constant(gather_positions(&sel, &build_pos_table(4, 5).unwrap()).unwrap());
    let a = attention_core(
        f.add(pos).unwrap(),
        tape.constant(store.get(block.w_q).clone()),
        tape.constant(store.get(block.w_k).clone()),
        1e-5,
    )
    .unwrap()
    .value();
    for row in a.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let ax = a.matmul(&x.clone().reshape(&[6, 20]).unwrap()).unwrap();
    for i in 0..120 {
        let residual = y.data()[i] - x.data()[i];
        assert!((residual - ax.data()[i]).abs() <= 1e-12 * (1.0 + ax.data()[i].abs()));
    }
}

#[test]
fn clamped_k_uses_every_position() {
    // K = 2^(2+3) = 32 but only 6 positions exist.
    let (store, block) = serank(4, 3, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 4, 2, 3], &mut rng);
    assert_eq!(block.k, 32);
    assert_eq!(run_serank(&store, &block, &x).shape(), x.shape());
}

#[test]
fn channel_pool_hand_cases() {
    let tape = Tape::new();
    let one = Tensor::new(&[1, 1, 1, 2], vec![3.0f64, -1.0]).unwrap();
    let (avg, max) = channel_pool(tape.constant(one.clone())).unwrap();
    assert_eq!(*avg.value(), one);
    assert_eq!(*max.value(), one);
    let two = Tensor::new(&[1, 2, 1, 1], vec![2.0f64, 4.0]).unwrap();
    let (avg, max) = channel_pool(tape.constant(two)).unwrap();
    assert_eq!(avg.value().data(), &[3.0]);
    assert_eq!(max.value().data(), &[4.0]);
    let flat = Tensor::full(&[2, 3, 2, 2], 1.5f64);
    let (avg, max) = channel_pool(tape.constant(flat)).unwrap();
    assert!(avg.value().data().iter().chain(max.value().data()).all(|&v| v == 1.5));
}

fn lsff(seed: u64) -> (ParamStore<f64>, LsffBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = LsffBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 7).unwrap();
    (store, block)
}

#[test]
fn fusing_a_feature_with_itself_is_exact() {
    let (store, block) = lsff(1);
    assert_eq!(store.get(block.attn.weight).shape(), &[1, 2, 7, 7]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 8, 8], &mut rng).map(|v| 1e3 * v);
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let xv = tape.constant(x.clone());
    assert_eq!(*block.forward(&s, xv, xv).unwrap().value(), x);
}

#[test]
fn zero_attention_gives_the_midpoint() {
    let (mut store, block) = lsff(3);
    let z = Tensor::zeros(store.get(block.attn.weight).shape());
    store.set(block.attn.weight, z).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random(&[1, 4, 6, 6], &mut rng), random(&[1, 4, 6, 6], &mut rng));
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let y = block.forward(&s, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
    for ((&y, &a), &b) in y.data().iter().zip(a.data()).zip(b.data()) {
        assert!((y - (a + b) / 2.0).abs() <= 1e-6);
    }
}

#[test]
fn fusion_gate_is_shared_across_channels() {
    let (store, block) = lsff(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (random(&[1, 3, 5, 5], &mut rng), random(&[1, 3, 5, 5], &mut rng));
    let tape = Tape::new();
    let s = Session::inference(&tape, &store);
    let gate = block.gate(&s, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
    assert_eq!(gate.shape(), &[1, 1, 5, 5]);
    let y = block.forward(&s, tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
    for c in 0..3 {
        for p in 0..25 {
            let i = c * 25 + p;
            let expect = b.data()[i] + (a.data()[i] - b.data()[i]) * gate.data()[p];
            assert_eq!(y.data()[i], expect);
        }
    }
    assert!(block.forward(&s, tape.constant(a), tape.constant(Tensor::zeros(&[1, 2, 5, 5]))).is_err());
}
