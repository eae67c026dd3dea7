//! Central finite-difference checks of every learnable operation, shared by
//! the gradient tests and the acceptance runner.

#![allow(dead_code)]

use crate::common::{rand_tensor, rng, tiny_model, toy_batch};
use dyndistill::adaptor::{AdaptHead, PermuteEncoder};
use dyndistill::appearance::{rasterize, AppearanceEncoder};
use dyndistill::autodiff::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use dyndistill::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use dyndistill::backbone::MlpBlock;
use dyndistill::config::{AxialShiftConfig, DistillConfig, HeadConfig, SoftmaxDomain};
use dyndistill::distill::{distill_loss, DistillOptions};
use dyndistill::head::{self, assign, Head};
use dyndistill::interaction::InteractionEncoder;
use dyndistill::label_encoder::{LabelDescriptor, LabelEncoder};
use dyndistill::nn::{Builder, FeatureMap};
use rand::Rng;

pub const MAX_REL_ERROR: f64 = 1e-4;

fn options(max_probes: usize) -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        floor: 1e-5,
        max_probes,
    }
}

/// One named gradient check.
pub type Check = (String, GradCheckReport);

pub fn passed(c: &Check) -> bool {
    c.1.probes > 0 && c.1.max_rel_error < MAX_REL_ERROR
}

/// Panics with the first failing check.
pub fn assert_all(checks: &[Check]) {
    assert!(!checks.is_empty());
    for c in checks {
        assert!(
            passed(c),
            "{}: relative error {:.3e} at {} ({} probes)",
            c.0,
            c.1.max_rel_error,
            c.1.worst,
            c.1.probes
        );
    }
}

/// Random-weighted sum so each output element gets its own cotangent.
fn project(g: &mut Graph<'_>, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let w = g.constant(rand_tensor(&mut rng(seed), r, c));
    let p = g.mul(x, w);
    g.sum_all(p)
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

/// Replaces every parameter with a random tensor of the same shape.
fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for id in all_ids(store) {
        let (rows, cols) = store.get(id).shape();
        store.set(id, rand_tensor(&mut r, rows, cols).map(|v| scale * v));
    }
}

/// Checks the parameters of `store` and, separately, one free input.
fn check_layer(out: &mut Vec<Check>, name: &str, store: &ParamStore, x: &Tensor, build: impl Fn(&mut Graph<'_>, Var) -> Var) {
    let rep = check_params(store, &all_ids(store), options(32), |g| {
        let xv = g.constant(x.clone());
        build(g, xv)
    });
    out.push((format!("{name} params"), rep));
    let mut lifted = store.clone();
    let id = lifted.add("input", x.clone());
    let rep = check_params(&lifted, &[id], options(64), |g| {
        let xv = g.param(id);
        build(g, xv)
    });
    out.push((format!("{name} input"), rep));
}

fn labels(n: usize, num_classes: usize, seed: u64) -> Vec<LabelDescriptor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let x = r.gen_range(0.0..0.5);
            let y = r.gen_range(0.0..0.5);
            let bbox = [x, y, x + r.gen_range(0.2..0.5), y + r.gen_range(0.2..0.5)];
            LabelDescriptor::new(bbox, r.gen_range(0..num_classes))
        })
        .collect()
}

pub fn mlp_block(out: &mut Vec<Check>) {
    for (k, &(c, h, w, s, d)) in [(4, 8, 8, 5, 1), (6, 3, 5, 3, 2), (5, 4, 2, 1, 1)].iter().enumerate() {
        let mut store = ParamStore::new();
        let block = MlpBlock::new(&mut Builder::new(&mut store, k as u64), "b", AxialShiftConfig::new(s, d, c), 2);
        randomize(&mut store, 100 + k as u64, 0.5);
        let x = rand_tensor(&mut rng(k as u64 + 10), h * w, c);
        check_layer(out, &format!("mlp_block {c}x{h}x{w} s{s} d{d}"), &store, &x, |g, xv| {
            let y = block.forward(g, FeatureMap::new(xv, h, w)).unwrap();
            project(g, y.var, 99)
        });
    }
}

pub fn encode_labels(out: &mut Vec<Check>) {
    for (k, &(n, classes, c)) in [(1usize, 2usize, 4usize), (3, 3, 8), (5, 2, 6)].iter().enumerate() {
        let mut store = ParamStore::new();
        let enc = LabelEncoder::new(&mut Builder::new(&mut store, k as u64), classes, c);
        randomize(&mut store, 200 + k as u64, 0.5);
        let ls = labels(n, classes, k as u64 + 3);
        let ids = all_ids(&store);
        assert!(ids.contains(&enc.align_in.weight) && ids.contains(&enc.align_feat.weight));
        let rep = check_params(&store, &ids, options(32), |g| {
            let y = enc.forward(g, &ls).unwrap().expect("labels present");
            project(g, y, 7)
        });
        out.push((format!("encode_labels n={n} c={c}"), rep));
    }
}

pub fn appearance_pooling(out: &mut Vec<Check>) {
    for (k, &(h, n, c)) in [(4usize, 1usize, 3usize), (6, 3, 5), (8, 2, 4)].iter().enumerate() {
        let mut store = ParamStore::new();
        let enc = AppearanceEncoder::new(&mut Builder::new(&mut store, k as u64), c);
        let masks = rasterize(&labels(n, 2, 300 + k as u64), h, h);
        let x = rand_tensor(&mut rng(k as u64), h * h, c);
        check_layer(out, &format!("appearance {h}x{h} n={n}"), &store, &x, |g, xv| {
            let a = enc.forward(g, FeatureMap::new(xv, h, h), &masks);
            project(g, a, 5)
        });
    }
}

pub fn interact(out: &mut Vec<Check>) {
    for (k, &(m, n, c, heads)) in [(4usize, 3usize, 4usize, 2usize), (2, 1, 6, 3), (5, 4, 8, 1)].iter().enumerate() {
        let mut store = ParamStore::new();
        let enc = InteractionEncoder::new(&mut Builder::new(&mut store, k as u64), c, heads).unwrap();
        randomize(&mut store, 400 + k as u64, 0.7);
        let mut r = rng(40 + k as u64);
        let a = rand_tensor(&mut r, m, c);
        let l = rand_tensor(&mut r, n, c);
        let name = format!("interact m={m} n={n} c={c} heads={heads}");
        check_layer(out, &format!("{name} wrt appearance"), &store, &a, |g, av| {
            let lv = g.constant(l.clone());
            let y = enc.forward(g, av, Some(lv)).unwrap();
            project(g, y, 8)
        });
        check_layer(out, &format!("{name} wrt labels"), &store, &l, |g, lv| {
            let av = g.constant(a.clone());
            let y = enc.forward(g, av, Some(lv)).unwrap();
            project(g, y, 8)
        });
    }
}

pub fn permute_encode(out: &mut Vec<Check>) {
    let cases = [(4usize, 4usize, 2usize, false), (2, 6, 3, true), (3, 4, 4, false), (4, 6, 2, true)];
    for (k, &(h, c, s, weighted)) in cases.iter().enumerate() {
        let mut store = ParamStore::new();
        let enc = PermuteEncoder::new(&mut Builder::new(&mut store, k as u64), h, h, c, s, weighted).unwrap();
        randomize(&mut store, 500 + k as u64, 0.5);
        let x = rand_tensor(&mut rng(k as u64), h * h, c);
        check_layer(out, &format!("permute {h}x{h}x{c} s={s} weighted={weighted}"), &store, &x, |g, xv| {
            let y = enc.forward(g, FeatureMap::new(xv, h, h)).unwrap();
            project(g, y.var, 3)
        });
    }
}

pub fn adapt_student(out: &mut Vec<Check>) {
    for (k, &(h, w, c)) in [(4usize, 4usize, 3usize), (2, 5, 4), (6, 3, 2)].iter().enumerate() {
        let mut store = ParamStore::new();
        let adapt = AdaptHead::new(&mut Builder::new(&mut store, k as u64), c);
        randomize(&mut store, 600 + k as u64, 0.5);
        let x = rand_tensor(&mut rng(k as u64), h * w, c);
        check_layer(out, &format!("adapt {h}x{w}x{c}"), &store, &x, |g, xv| {
            let y = adapt.forward(g, FeatureMap::new(xv, h, w));
            project(g, y.var, 4)
        });
    }
}

pub fn head_branches(out: &mut Vec<Check>) {
    let cfg = HeadConfig::default();
    for (k, &(size, c, classes, n)) in [(4usize, 4usize, 2usize, 1usize), (6, 3, 3, 2), (8, 5, 2, 3)].iter().enumerate() {
        let mut store = ParamStore::new();
        let head = Head::new(&mut Builder::new(&mut store, k as u64), &cfg, c, classes);
        let stride = 8;
        let image = size * stride;
        let targets = assign(&cfg, &labels(n, classes, 700 + k as u64), image, classes, &[(size, size, stride)]);
        assert!(!targets[0].positives.is_empty(), "case {k} has no positives");
        let x = rand_tensor(&mut rng(k as u64), size * size, c);
        check_layer(out, &format!("head {size}x{size}x{c} n={n}"), &store, &x, |g, xv| {
            let out = head.forward_level(g, FeatureMap::new(xv, size, size), stride).unwrap();
            let sums = head::loss_sums(g, &cfg, &[out], &targets);
            head::batch_loss(g, &[sums])
        });
    }
}

pub fn distill_path(out: &mut Vec<Check>) {
    let cases = [
        (vec![(4usize, 4usize)], 3usize, SoftmaxDomain::Full, 1.0),
        (vec![(4, 4), (2, 2)], 4, SoftmaxDomain::Full, 5.0),
        (vec![(3, 5), (2, 2), (1, 1)], 2, SoftmaxDomain::PerChannel, 15.0),
    ];
    for (k, (shapes, c, domain, tau)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, k as u64);
        let adapts: Vec<AdaptHead> = (0..shapes.len())
            .map(|i| b.scope(&format!("level{i}"), |b| AdaptHead::new(b, c)))
            .collect();
        randomize(&mut store, 800 + k as u64, 0.5);
        let mut r = rng(k as u64);
        let teacher: Vec<Tensor> = shapes.iter().map(|&(h, w)| rand_tensor(&mut r, h * w, c).map(|v| 3.0 * v)).collect();
        let student: Vec<Tensor> = shapes.iter().map(|&(h, w)| rand_tensor(&mut r, h * w, c).map(|v| 3.0 * v)).collect();
        let opts = DistillOptions {
            tau,
            domain,
            ..DistillOptions::default()
        };
        let rep = check_params(&store, &all_ids(&store), options(32), |g| {
            let t: Vec<Var> = teacher.iter().map(|t| g.constant(t.clone())).collect();
            let s: Vec<Var> = student
                .iter()
                .zip(&shapes)
                .zip(&adapts)
                .map(|((x, &(h, w)), a)| {
                    let xv = g.constant(x.clone());
                    a.forward(g, FeatureMap::new(xv, h, w)).var
                })
                .collect();
            distill_loss(g, &t, &s, opts).unwrap()
        });
        out.push((format!("distill levels={} tau={tau}", shapes.len()), rep));

        // Student maps lifted to parameters; the teacher stays detached.
        let mut lifted = ParamStore::new();
        let ids: Vec<ParamId> = student.iter().enumerate().map(|(i, s)| lifted.add(format!("s{i}"), s.clone())).collect();
        let rep = check_params(&lifted, &ids, options(64), |g| {
            let t: Vec<Var> = teacher.iter().map(|t| g.constant(t.clone())).collect();
            let s: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            distill_loss(g, &t, &s, opts).unwrap()
        });
        out.push((format!("distill input levels={}", shapes.len()), rep));
    }
}

pub fn full_objective_components(out: &mut Vec<Check>) {
    let mut cfg = tiny_model();
    let batch = toy_batch(2, cfg.image_size, 9);
    let refs: Vec<_> = batch.iter().collect();
    for (k, weighted) in [false, true].into_iter().enumerate() {
        cfg.weighted_aggregation = weighted;
        cfg.init_seed = k as u64;
        let mut model = dyndistill::model::Detector::new(&cfg).unwrap();
        randomize(&mut model.params, 900 + k as u64, 0.3);
        let dc = DistillConfig {
            lambda: 0.5,
            tau: 4.0,
            detach_student_in_teacher: false,
            ..DistillConfig::default()
        };
        let all = all_ids(&model.params);
        let adapt: Vec<ParamId> = model.params.ids_with_prefix("adapt.").collect();
        // The teacher is detached inside the distillation term, so that term
        // is a true gradient only for the adaptation layers.
        let parts: [(&str, &[ParamId]); 3] = [("student", &all), ("teacher", &all), ("distill", &adapt)];
        for (part, (name, ids)) in parts.into_iter().enumerate() {
            let rep = check_params(&model.params, ids, options(2), |g| {
                let l = model.total_loss(g, &refs, &dc).unwrap();
                [l.det_student, l.det_teacher.unwrap(), l.distill.unwrap()][part]
            });
            out.push((format!("{name} objective weighted={weighted}"), rep));
        }
    }
}

/// Every case, named after the operation it covers.
pub const CASES: [(&str, fn(&mut Vec<Check>)); 9] = [
    ("mlp_block", mlp_block),
    ("encode_labels", encode_labels),
    ("appearance", appearance_pooling),
    ("interact", interact),
    ("permute_encode", permute_encode),
    ("adapt_student", adapt_student),
    ("head_branches", head_branches),
    ("distill_loss", distill_path),
    ("full_objective", full_objective_components),
];
