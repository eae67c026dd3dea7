mod common;

use common::{add_bias, layer_norm_ref, matmul_ref, rand_tensor, rng};
use dyndistill::adaptor::{permute_tables, scatter, scatter_owners, AdaptHead, PermuteEncoder};
use dyndistill::appearance::{rasterize, rasterize_box, AppearanceEncoder, MaskSet};
use dyndistill::autodiff::{Graph, ParamStore, Tensor, Var};
use dyndistill::interaction::{attention_weights, InteractionEncoder};
use dyndistill::label_encoder::{LabelDescriptor, LabelEncoder};
use dyndistill::nn::{Builder, FeatureMap, LN_EPS};
use proptest::prelude::*;
use rand::Rng;

fn active(m: &[bool]) -> usize {
    m.iter().filter(|&&v| v).count()
}

// ---- label encoder ----

fn three_labels() -> Vec<LabelDescriptor> {
    vec![
        LabelDescriptor::new([0.0, 0.0, 1.0, 1.0], 0),
        LabelDescriptor::new([0.1, 0.2, 0.4, 0.6], 1),
        LabelDescriptor::new([0.5, 0.5, 0.9, 0.7], 0),
    ]
}

#[test]
fn label_encoding_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let enc = LabelEncoder::new(&mut Builder::new(&mut store, 3), 2, 16);
    let labels = three_labels();
    let perm = [2usize, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| labels[i]).collect();
    let mut g = Graph::with_params(&store);
    let a = enc.forward(&mut g, &labels).unwrap().unwrap();
    let b = enc.forward(&mut g, &permuted).unwrap().unwrap();
    let (a, b) = (g.value(a).clone(), g.value(b).clone());
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(b.row_slice(row), a.row_slice(src));
    }
    assert!(a.all_finite());
    let alone = enc.forward(&mut g, &labels[..1]).unwrap().unwrap();
    assert_eq!(g.value(alone).row_slice(0), a.row_slice(0));
}

#[test]
fn identity_initialised_encoder_reduces_to_normalisation() {
    // With C equal to the descriptor width, an identity lift and a zero
    // residual branch, the encoder is LN(LN(descriptor)).
    let mut store = ParamStore::new();
    let enc = LabelEncoder::new(&mut Builder::new(&mut store, 0), 2, 6);
    store.set(enc.fc1.weight, Tensor::identity(6));
    store.set(enc.fc3.weight, Tensor::zeros(6, 6));
    let labels = three_labels();
    let desc = enc.descriptors(&labels).unwrap();
    let want = layer_norm_ref(&layer_norm_ref(&desc, LN_EPS), LN_EPS);
    let mut g = Graph::with_params(&store);
    let y = enc.forward(&mut g, &labels).unwrap().unwrap();
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn empty_and_invalid_labels() {
    let mut store = ParamStore::new();
    let enc = LabelEncoder::new(&mut Builder::new(&mut store, 0), 2, 8);
    let mut g = Graph::with_params(&store);
    assert!(enc.forward(&mut g, &[]).unwrap().is_none());
    for bad in [
        LabelDescriptor::new([0.5, 0.1, 0.4, 0.2], 0),
        LabelDescriptor::new([0.1, 0.1, 1.2, 0.2], 0),
        LabelDescriptor::new([0.1, 0.1, 0.2, 0.2], 2),
    ] {
        assert!(matches!(
            enc.forward(&mut g, &[bad]),
            Err(dyndistill::Error::Annotation(_))
        ));
    }
}

// ---- masks and appearance ----

#[test]
fn mask_examples() {
    assert_eq!(active(&rasterize_box([0.0, 0.0, 1.0, 1.0], 7, 7)), 49);
    let half = rasterize_box([0.0, 0.0, 0.5, 0.5], 8, 8);
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(half[r * 8 + c], r < 4 && c < 4, "cell ({r}, {c})");
        }
    }
    let tiny = rasterize_box([0.49, 0.49, 0.51, 0.51], 7, 7);
    assert_eq!(active(&tiny), 1);
    assert!(tiny[3 * 7 + 3]);
    let off_centre = rasterize_box([0.01, 0.01, 0.02, 0.02], 4, 4);
    assert_eq!(active(&off_centre), 1);
    assert!(off_centre[0]);
}

proptest! {
    #[test]
    fn masks_follow_cell_centre_membership(
        x1 in 0.0f64..0.9, y1 in 0.0f64..0.9, bw in 0.01f64..0.5, bh in 0.01f64..0.5,
        h in 1usize..12, w in 1usize..12,
    ) {
        let b = [x1, y1, (x1 + bw).min(1.0), (y1 + bh).min(1.0)];
        let m = rasterize_box(b, h, w);
        let inside = |r: usize, c: usize| {
            let cx = (c as f64 + 0.5) / w as f64;
            let cy = (r as f64 + 0.5) / h as f64;
            cx >= b[0] && cx <= b[2] && cy >= b[1] && cy <= b[3]
        };
        let expected = (0..h * w).filter(|p| inside(p / w, p % w)).count();
        if expected > 0 {
            for p in 0..h * w {
                prop_assert_eq!(m[p], inside(p / w, p % w));
            }
        } else {
            prop_assert_eq!(active(&m), 1);
        }
    }
}

fn appearance_with(store: &mut ParamStore, dim: usize, weight: Tensor, bias: Tensor) -> AppearanceEncoder {
    let enc = AppearanceEncoder::new(&mut Builder::new(store, 0), dim);
    store.set(enc.proj.weight, weight);
    store.set(enc.proj.bias.unwrap(), bias);
    enc
}

#[test]
fn appearance_examples() {
    let mut store = ParamStore::new();
    let enc = appearance_with(&mut store, 1, Tensor::identity(1), Tensor::zeros(1, 1));
    let masks = MaskSet {
        h: 2,
        w: 2,
        masks: vec![vec![true, false, false, false], vec![true; 4]],
    };
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
    let a = enc.forward(&mut g, FeatureMap::new(x, 2, 2), &masks);
    assert_eq!(g.value(a).data(), &[1.0, 2.5]);
}

#[test]
fn appearance_matches_masked_mean_loop() {
    let mut r = rng(21);
    let (c, h, w) = (4, 6, 6);
    let weight = rand_tensor(&mut r, c, c);
    let bias = rand_tensor(&mut r, 1, c);
    let mut store = ParamStore::new();
    let enc = appearance_with(&mut store, c, weight.clone(), bias.clone());
    let x = rand_tensor(&mut r, h * w, c);
    let labels: Vec<_> = (0..3)
        .map(|_| {
            let x1 = r.gen_range(0.0..0.6);
            let y1 = r.gen_range(0.0..0.6);
            LabelDescriptor::new([x1, y1, x1 + r.gen_range(0.05..0.4), y1 + r.gen_range(0.05..0.4)], 0)
        })
        .collect();
    let masks = rasterize(&labels, h, w);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let got = enc.forward(&mut g, FeatureMap::new(xv, h, w), &masks);
    let proj = add_bias(&matmul_ref(&x, &weight), &bias);
    for (i, m) in masks.masks.iter().enumerate() {
        let n = active(m) as f64;
        for ch in 0..c {
            let sum: f64 = (0..h * w).filter(|&p| m[p]).map(|p| proj.get(p, ch)).sum();
            assert!((g.value(got).get(i, ch) - sum / n).abs() < 1e-6);
        }
    }
}

#[test]
fn appearance_is_size_invariant_on_constant_features() {
    let mut store = ParamStore::new();
    let enc = appearance_with(&mut store, 3, Tensor::identity(3), Tensor::zeros(1, 3));
    let x = Tensor::from_fn(64, 3, |_, c| c as f64 + 0.5);
    let labels = [
        LabelDescriptor::new([0.0, 0.0, 0.25, 0.25], 0),
        LabelDescriptor::new([0.0, 0.0, 1.0, 1.0], 0),
    ];
    let masks = rasterize(&labels, 8, 8);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x);
    let a = enc.forward(&mut g, FeatureMap::new(xv, 8, 8), &masks);
    let a = g.value(a);
    assert_eq!(a.row_slice(0), a.row_slice(1));
    assert_eq!(a.row_slice(1), a.row_slice(2));
}

// ---- interaction ----

fn softmax_stable(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn lin(store: &ParamStore, l: &dyndistill::nn::Linear, x: &Tensor) -> Tensor {
    add_bias(&matmul_ref(x, store.get(l.weight)), store.get(l.bias.unwrap()))
}

fn attention_ref(store: &ParamStore, enc: &InteractionEncoder, a: &Tensor, l: &Tensor) -> Tensor {
    let q = lin(store, &enc.query, a);
    let k = lin(store, &enc.key, l);
    let v = lin(store, &enc.value, l);
    let dh = enc.dim / enc.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut u = Tensor::zeros(a.rows(), enc.dim);
    for h in 0..enc.heads {
        for i in 0..a.rows() {
            let scores: Vec<f64> = (0..l.rows())
                .map(|j| (0..dh).map(|d| q.get(i, h * dh + d) * k.get(j, h * dh + d)).sum::<f64>() * scale)
                .collect();
            let p = softmax_stable(&scores);
            for d in 0..dh {
                let val: f64 = (0..l.rows()).map(|j| p[j] * v.get(j, h * dh + d)).sum();
                u.set(i, h * dh + d, val);
            }
        }
    }
    lin(store, &enc.out, &u)
}

#[test]
fn attention_matches_loop_reference() {
    let mut store = ParamStore::new();
    let enc = InteractionEncoder::new(&mut Builder::new(&mut store, 8), 4, 2).unwrap();
    let mut r = rng(2);
    let a = rand_tensor(&mut r, 4, 4);
    let l = rand_tensor(&mut r, 3, 4);
    let mut g = Graph::with_params(&store);
    let av = g.constant(a.clone());
    let lv = g.constant(l.clone());
    let y = enc.forward(&mut g, av, Some(lv)).unwrap();
    assert!(g.value(y).max_abs_diff(&attention_ref(&store, &enc, &a, &l)) < 1e-6);
}

#[test]
fn single_label_attention_returns_its_value() {
    let mut store = ParamStore::new();
    let enc = InteractionEncoder::new(&mut Builder::new(&mut store, 1), 6, 3).unwrap();
    store.set(enc.out.weight, Tensor::identity(6));
    store.set(enc.out.bias.unwrap(), Tensor::zeros(1, 6));
    let mut r = rng(3);
    let a = rand_tensor(&mut r, 5, 6);
    let l = rand_tensor(&mut r, 1, 6);
    let value = lin(&store, &enc.value, &l);
    let mut g = Graph::with_params(&store);
    let av = g.constant(a);
    let lv = g.constant(l);
    let y = enc.forward(&mut g, av, Some(lv)).unwrap();
    for i in 0..5 {
        for c in 0..6 {
            assert!((g.value(y).get(i, c) - value.get(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_symmetries_and_stability() {
    let mut store = ParamStore::new();
    let enc = InteractionEncoder::new(&mut Builder::new(&mut store, 4), 8, 2).unwrap();
    let mut r = rng(5);
    let a = rand_tensor(&mut r, 3, 8);
    let l = rand_tensor(&mut r, 4, 8);
    let perm_rows = |t: &Tensor, p: &[usize]| Tensor::from_fn(p.len(), t.cols(), |i, c| t.get(p[i], c));
    let run = |a: &Tensor, l: &Tensor| -> Tensor {
        let mut g = Graph::with_params(&store);
        let av = g.constant(a.clone());
        let lv = g.constant(l.clone());
        let y = enc.forward(&mut g, av, Some(lv)).unwrap();
        g.value(y).clone()
    };
    let base = run(&a, &l);
    assert!(run(&a, &perm_rows(&l, &[3, 1, 0, 2])).max_abs_diff(&base) < 1e-12);
    let qp = [2usize, 0, 1];
    assert!(run(&perm_rows(&a, &qp), &l).max_abs_diff(&perm_rows(&base, &qp)) < 1e-12);

    let huge = Tensor::from_fn(3, 8, |i, c| if (i + c) % 2 == 0 { 1e4 } else { -1e4 });
    let mut g = Graph::with_params(&store);
    let av = g.constant(huge);
    let lv = g.constant(l.clone());
    for w in attention_weights(&enc, &mut g, av, lv) {
        assert!(w.all_finite());
        for i in 0..w.rows() {
            assert!((w.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let y = enc.forward(&mut g, av, Some(lv)).unwrap();
    assert!(g.value(y).all_finite());
}

#[test]
fn null_label_serves_empty_images() {
    let mut store = ParamStore::new();
    let enc = InteractionEncoder::new(&mut Builder::new(&mut store, 4), 8, 2).unwrap();
    let mut g = Graph::with_params(&store);
    let a = g.constant(rand_tensor(&mut rng(6), 1, 8));
    let y = enc.forward(&mut g, a, None).unwrap();
    assert_eq!(g.shape(y), (1, 8));
    assert!(InteractionEncoder::new(&mut Builder::new(&mut store, 4), 6, 4).is_err());
}

// ---- scatter ----

fn embeddings(g: &mut Graph<'_>, n: usize, c: usize) -> (Var, Tensor) {
    let t = Tensor::from_fn(n, c, |i, k| (10 * i + k) as f64);
    (g.constant(t.clone()), t)
}

#[test]
fn scatter_with_no_objects_broadcasts_virtual_row() {
    let masks = rasterize(&[], 4, 4);
    let mut g = Graph::new();
    let (e, t) = embeddings(&mut g, 1, 3);
    let f = scatter(&mut g, e, &masks, &[]);
    for p in 0..16 {
        assert_eq!(g.value(f.var).row_slice(p), t.row_slice(0));
    }
}

#[test]
fn scatter_with_full_box_paints_everything() {
    let labels = [LabelDescriptor::new([0.0, 0.0, 1.0, 1.0], 0)];
    let masks = rasterize(&labels, 4, 4);
    let mut g = Graph::new();
    let (e, t) = embeddings(&mut g, 2, 3);
    let f = scatter(&mut g, e, &masks, &[1.0]);
    for p in 0..16 {
        assert_eq!(g.value(f.var).row_slice(p), t.row_slice(0));
    }
}

#[test]
fn scatter_places_disjoint_boxes() {
    let labels = [
        LabelDescriptor::new([0.0, 0.0, 0.25, 0.5], 0),
        LabelDescriptor::new([0.5, 0.5, 1.0, 0.875], 1),
    ];
    let masks = rasterize(&labels, 8, 8);
    let areas: Vec<f64> = labels.iter().map(|l| l.area()).collect();
    let mut g = Graph::new();
    let (e, t) = embeddings(&mut g, 3, 2);
    let f = scatter(&mut g, e, &masks, &areas);
    for r in 0..8 {
        for c in 0..8 {
            let row = if r < 4 && c < 2 {
                0
            } else if (4..7).contains(&r) && c >= 4 {
                1
            } else {
                2
            };
            assert_eq!(g.value(f.var).row_slice(r * 8 + c), t.row_slice(row), "cell ({r}, {c})");
        }
    }
}

#[test]
fn smaller_objects_are_painted_on_top() {
    let labels = [
        LabelDescriptor::new([0.0, 0.0, 1.0, 1.0], 0),
        LabelDescriptor::new([0.25, 0.25, 0.5, 0.5], 1),
    ];
    let masks = rasterize(&labels, 8, 8);
    let owners = scatter_owners(&masks, &[1.0, 0.0625]);
    assert_eq!(owners[3 * 8 + 3], 1);
    assert_eq!(owners[7 * 8 + 7], 0);
}

// ---- permute encoder ----

fn permute_with(store: &mut ParamStore, h: usize, w: usize, c: usize, s: usize, seed: u64) -> PermuteEncoder {
    PermuteEncoder::new(&mut Builder::new(store, seed), h, w, c, s, false).unwrap()
}

fn set_identity(store: &mut ParamStore, l: &dyndistill::nn::Linear) {
    store.set(l.weight, Tensor::identity(l.in_dim));
    store.set(l.bias.unwrap(), Tensor::zeros(1, l.out_dim));
}

#[test]
fn identity_branches_triple_the_input() {
    let mut store = ParamStore::new();
    let enc = permute_with(&mut store, 4, 6, 8, 4, 0);
    for l in [&enc.fc_h, &enc.fc_w, &enc.fc_c, &enc.fc_out] {
        set_identity(&mut store, l);
    }
    let x = rand_tensor(&mut rng(7), 24, 8);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let y = enc.forward(&mut g, FeatureMap::new(xv, 4, 6)).unwrap();
    assert!(g.value(y.var).max_abs_diff(&x.map(|v| 3.0 * v)) < 1e-12);
}

#[test]
fn permute_round_trip_is_exact() {
    let x = rand_tensor(&mut rng(8), 5 * 3, 6);
    for along_height in [true, false] {
        let (fwd, inv) = permute_tables(5, 3, 6, 3, along_height);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (rows, cols) = if along_height { (3 * 3, 5 * 2) } else { (3 * 5, 3 * 2) };
        let p = g.gather(xv, rows, cols, fwd);
        let back = g.gather(p, 15, 6, inv);
        assert_eq!(g.value(back), &x);
    }
}

/// Explicit loop over the permute-FC-unpermute pipeline of one spatial branch.
fn branch_ref(x: &Tensor, h: usize, w: usize, c: usize, s: usize, wt: &Tensor, b: &Tensor, along_height: bool) -> Tensor {
    let n = c / s;
    let along = if along_height { h } else { w };
    let other = if along_height { w } else { h };
    let mut y = Tensor::zeros(h * w, c);
    for seg in 0..s {
        for o in 0..other {
            let at = |a: usize, k: usize| {
                let (i, j) = if along_height { (a, o) } else { (o, a) };
                x.get(i * w + j, seg * n + k)
            };
            for a_out in 0..along {
                for k_out in 0..n {
                    let mut acc = b.get(0, a_out * n + k_out);
                    for a in 0..along {
                        for k in 0..n {
                            acc += at(a, k) * wt.get(a * n + k, a_out * n + k_out);
                        }
                    }
                    let (i, j) = if along_height { (a_out, o) } else { (o, a_out) };
                    y.set(i * w + j, seg * n + k_out, acc);
                }
            }
        }
    }
    y
}

#[test]
fn permute_encoder_matches_loop_reference() {
    let (c, h, w, s) = (8, 4, 4, 4);
    let mut store = ParamStore::new();
    let enc = permute_with(&mut store, h, w, c, s, 9);
    let mut r = rng(9);
    for l in [&enc.fc_h, &enc.fc_w, &enc.fc_c, &enc.fc_out] {
        store.set(l.bias.unwrap(), rand_tensor(&mut r, 1, l.out_dim));
    }
    let x = rand_tensor(&mut r, h * w, c);
    let p = |l: &dyndistill::nn::Linear| (store.get(l.weight).clone(), store.get(l.bias.unwrap()).clone());
    let (wh, bh) = p(&enc.fc_h);
    let (ww, bw) = p(&enc.fc_w);
    let (wc, bc) = p(&enc.fc_c);
    let (wo, bo) = p(&enc.fc_out);
    let xh = branch_ref(&x, h, w, c, s, &wh, &bh, true);
    let xw = branch_ref(&x, h, w, c, s, &ww, &bw, false);
    let xc = add_bias(&matmul_ref(&x, &wc), &bc);
    let sum = Tensor::from_fn(h * w, c, |i, k| xh.get(i, k) + xw.get(i, k) + xc.get(i, k));
    let want = add_bias(&matmul_ref(&sum, &wo), &bo);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x);
    let y = enc.forward(&mut g, FeatureMap::new(xv, h, w)).unwrap();
    assert!(g.value(y.var).max_abs_diff(&want) < 1e-6);
}

#[test]
fn height_branch_alone_after_weight_surgery() {
    let (c, h, w, s) = (4, 3, 5, 2);
    let mut store = ParamStore::new();
    let enc = permute_with(&mut store, h, w, c, s, 10);
    store.set(enc.fc_w.weight, Tensor::zeros(w * 2, w * 2));
    store.set(enc.fc_c.weight, Tensor::zeros(c, c));
    set_identity(&mut store, &enc.fc_out);
    let x = rand_tensor(&mut rng(10), h * w, c);
    let want = branch_ref(&x, h, w, c, s, store.get(enc.fc_h.weight), store.get(enc.fc_h.bias.unwrap()), true);
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x);
    let y = enc.forward(&mut g, FeatureMap::new(xv, h, w)).unwrap();
    assert!(g.value(y.var).max_abs_diff(&want) < 1e-12);
}

#[test]
fn permute_encoder_rejects_bad_segments_and_shapes() {
    let mut store = ParamStore::new();
    assert!(PermuteEncoder::new(&mut Builder::new(&mut store, 0), 4, 4, 6, 4, false).is_err());
    let enc = permute_with(&mut store, 4, 4, 8, 2, 0);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros(9, 8));
    assert!(enc.forward(&mut g, FeatureMap::new(x, 3, 3)).is_err());
}

// ---- adapt head ----

#[test]
fn adapt_head_starts_as_identity() {
    let mut store = ParamStore::new();
    let head = AdaptHead::new(&mut Builder::new(&mut store, 1), 5);
    for (h, w) in [(6, 6), (3, 7), (1, 1)] {
        let x = rand_tensor(&mut rng(h as u64), h * w, 5);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = head.forward(&mut g, FeatureMap::new(xv, h, w));
        assert_eq!(g.value(y.var), &x);
        assert_eq!((y.h, y.w), (h, w));
    }
}
