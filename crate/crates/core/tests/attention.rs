use moca_core::cgma::{
    guided_attention, interpolate_grid, multi_layer_block, patchify, progressive_update,
    random_matrix, AttnLayer, Block, CgmaParams, Image, InterpAxis, ParamInit,
};
use moca_core::config::ModelConfig;
use moca_core::{Matrix64, ParamStore, Tape64};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg(d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        seq_len: 5,
        d_model: d,
        heads,
        layers,
        grid: 2,
        patch_size: 1,
        channels: 1,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn head_outputs_lie_in_value_hull(seed in any::<u64>(), d in 2usize..7, n in 1usize..5, m in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = AttnLayer::init(&mut ParamInit::new(&mut store, seed), "a", d, 2, d);
        let mut tape = Tape64::new();
        let p = tape.bind(&store);
        let t = tape.constant(random_matrix(n, d, &mut rng));
        let g = tape.constant(random_matrix(m, d, &mut rng));
        let tr = guided_attention(&mut tape, &p, &layer, t, g, None).unwrap();
        for h in 0..2 {
            let (w, v, o) = (tape.value(tr.weights[h]), tape.value(tr.values[h]), tape.value(tr.heads[h]));
            for i in 0..n {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for c in 0..d {
                    let col = (0..m).map(|j| v.get(j, c));
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(o.get(i, c) >= lo - 1e-9 && o.get(i, c) <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn guide_permutation_is_bit_exact(seed in any::<u64>(), m in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = AttnLayer::init(&mut ParamInit::new(&mut store, seed), "a", 4, 3, 4);
        let target: Matrix64 = random_matrix(3, 4, &mut rng);
        let guide: Matrix64 = random_matrix(m, 4, &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let permuted = Matrix64::from_fn(m, 4, |i, j| guide.get(perm[i], j));
        let run = |g: &Matrix64| {
            let mut tape = Tape64::new();
            let p = tape.bind(&store);
            let t = tape.constant(target.clone());
            let g = tape.constant(g.clone());
            let out = guided_attention(&mut tape, &p, &layer, t, g, None).unwrap().out;
            tape.value(out).clone()
        };
        prop_assert_eq!(run(&guide), run(&permuted));
    }
}

#[test]
fn identical_layers_with_averaging_projection_equal_one_layer() {
    let d = 4;
    let mut store = ParamStore::<f64>::new();
    let block = Block::init(&mut ParamInit::new(&mut store, 3), "b", &cfg(d, 2, 2));
    let names: Vec<String> = store.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("b.l1.") {
            let src = names
                .iter()
                .position(|n| *n == format!("b.l0.{rest}"))
                .unwrap();
            let v = store.values()[src].clone();
            store.values_mut()[i] = v;
        }
    }
    let half = Matrix64::from_fn(2 * d, d, |r, c| if r % d == c { 0.5 } else { 0.0 });
    store.set(block.wl, half).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape64::new();
    let p = tape.bind(&store);
    let t = tape.constant(random_matrix(3, d, &mut rng));
    let g = tape.constant(random_matrix(5, d, &mut rng));
    let out = multi_layer_block(&mut tape, &p, &block, t, g, None)
        .unwrap()
        .out;
    let single = guided_attention(&mut tape, &p, &block.layers[0], t, g, None)
        .unwrap()
        .out;
    assert!(tape.value(out).max_abs_diff(tape.value(single)) < 1e-12);
}

#[test]
fn identity_fusion_passes_updated_text_through() {
    let d = 4;
    let mut store = ParamStore::<f64>::new();
    let params = CgmaParams::init(&mut ParamInit::new(&mut store, 5), &cfg(d, 2, 1));
    let top = Matrix64::from_fn(2 * d, d, |r, c| if r == c { 1.0 } else { 0.0 });
    store.set(params.w_fuse, top).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape64::new();
    let p = tape.bind(&store);
    let v: Vec<_> = (0..3)
        .map(|_| tape.constant(random_matrix(5, d, &mut rng)))
        .collect();
    let tr = progressive_update(&mut tape, &p, &params, v[0], v[1], v[2], None).unwrap();
    assert_eq!(tape.value(tr.fused), tape.value(tr.text));
}

#[test]
fn patchify_matches_nested_loops() {
    let (h, w, c, grid) = (6, 9, 2, 3);
    let pixels: Vec<f64> = (0..h * w * c).map(|i| i as f64).collect();
    let img = Image::new(h, w, c, pixels).unwrap();
    let got: Matrix64 = patchify(&img, grid).unwrap();
    let (ph, pw) = (h / grid, w / grid);
    let mut rows = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = Vec::new();
            for y in 0..ph {
                for x in 0..pw {
                    for ch in 0..c {
                        row.push(img.pixel(gy * ph + y, gx * pw + x, ch));
                    }
                }
            }
            rows.push(row);
        }
    }
    assert_eq!(got, Matrix64::from_rows(&rows).unwrap());
}

#[test]
fn interpolation_keeps_end_points_and_row_sums() {
    let g = Matrix64::from_fn(4, 3, |i, j| (i * 3 + j + 1) as f64);
    let g = Matrix64::from_fn(4, 3, |i, j| g.get(i, j) / g.row(i).iter().sum::<f64>());
    let q = interpolate_grid(&g, InterpAxis::Query, 7);
    assert_eq!(q.shape(), (7, 3));
    assert!(q
        .row(0)
        .iter()
        .zip(g.row(0))
        .all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(q
        .row(6)
        .iter()
        .zip(g.row(3))
        .all(|(a, b)| (a - b).abs() < 1e-12));
    let k = interpolate_grid(&g, InterpAxis::Key, 10);
    for i in 0..k.rows() {
        assert!((k.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
