use super::*;
use crate::autodiff::grad_check;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn setup(d: usize, seed: u64) -> (ParamStore<f64>, SpanPredictor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let sp = SpanPredictor::new(&mut store, d, &mut rng);
    // Larger weights than the default init so the oracles see real signal.
    for id in [
        sp.start_gru.w_input,
        sp.start_gru.w_hidden,
        sp.end_gru.w_input,
        sp.end_gru.w_hidden,
        sp.labels.table,
    ] {
        let n = store.value(id).numel();
        let noise = randn(&mut rng, n);
        for (v, z) in store.get_mut(id).value.data_mut().iter_mut().zip(noise) {
            *v = 0.4 * z;
        }
    }
    (store, sp)
}

#[test]
fn flip_extremes_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels = [false, false, true, false, false, false];
    let valid = [true, true, true, true, false, false];
    let (same, n) = flip_labels(&labels, 0.0, &valid, &mut rng).unwrap();
    assert_eq!((same.as_slice(), n), (&labels[..], 0));
    let (inv, n) = flip_labels(&labels, 1.0, &valid, &mut rng).unwrap();
    assert_eq!(inv, vec![true, true, false, true, false, false]);
    assert_eq!(n, 4);
    assert!(flip_labels(&labels, 1.5, &valid, &mut rng).is_err());
    assert!(flip_labels(&labels, -0.1, &valid, &mut rng).is_err());
}

#[test]
fn flip_count_mean_matches_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut labels = vec![false; 128];
    labels[17] = true;
    let valid = vec![true; 128];
    let trials = 10_000;
    let total: usize = (0..trials)
        .map(|_| flip_labels(&labels, 0.2, &valid, &mut rng).unwrap().1)
        .sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - 25.6).abs() < 0.2, "mean flips {mean}");
}

#[test]
fn embedding_rows_follow_bits() {
    let (store, sp) = setup(4, 1);
    let table = store.value(sp.labels.table).data().to_vec();
    let row = |r: usize| table[r * 4..(r + 1) * 4].to_vec();
    let mut g = Graph::with_params(&store);
    let zeros = embed_labels(&mut g, &[false; 6], Boundary::Start, &sp.labels).unwrap();
    for chunk in g.value(zeros).data().chunks(4) {
        assert_eq!(chunk, &row(NONSTART)[..]);
    }
    let mut bits = [false; 6];
    bits[3] = true;
    let e = embed_labels(&mut g, &bits, Boundary::End, &sp.labels).unwrap();
    for (t, chunk) in g.value(e).data().chunks(4).enumerate() {
        assert_eq!(chunk, &row(if t == 3 { END } else { NONEND })[..]);
    }
}

#[test]
fn embedding_decodes_by_nearest_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let table = LabelEmbeddingTable::new(&mut store, 8, &mut rng);
    let rows = store.value(table.table).data().to_vec();
    let bits: Vec<bool> = (0..40).map(|_| rng.random::<bool>()).collect();
    let mut g = Graph::with_params(&store);
    for kind in [Boundary::Start, Boundary::End] {
        let e = embed_labels(&mut g, &bits, kind, &table).unwrap();
        for (t, chunk) in g.value(e).data().chunks(8).enumerate() {
            let nearest = (0..LABEL_ROWS)
                .min_by(|&a, &b| {
                    let da: f64 = chunk
                        .iter()
                        .zip(&rows[a * 8..])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    let db: f64 = chunk
                        .iter()
                        .zip(&rows[b * 8..])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, kind.token(bits[t]));
        }
    }
}

#[test]
fn gru_cell_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, "g", 3, 4, &mut rng);
    for id in [gru.w_input, gru.w_hidden, gru.b_input, gru.b_hidden] {
        let n = store.value(id).numel();
        let noise = randn(&mut rng, n);
        store.get_mut(id).value.data_mut().copy_from_slice(&noise);
    }
    let x = randn(&mut rng, 3);
    let h0 = randn(&mut rng, 4);
    let target = randn(&mut rng, 4);
    let report = grad_check(&mut store, 1e-6, |g| {
        let xv = g.constant(Tensor::new(&[1, 3], x.clone())?);
        let h = g.constant(Tensor::new(&[1, 4], h0.clone())?);
        let w = g.param(gru.w_input);
        let b = g.param(gru.b_input);
        let gi = g.matmul(xv, w)?;
        let gi = g.add_row(gi, b)?;
        let h1 = gru.cell(g, gi, h)?;
        let tv = g.constant(Tensor::new(&[1, 4], target.clone())?);
        let p = g.mul(h1, tv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

fn random_gru(seed: u64, input: usize, hidden: usize) -> (ParamStore<f64>, Gru, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let gru = Gru::new(&mut store, "g", input, hidden, &mut rng);
    for id in [gru.w_input, gru.w_hidden, gru.b_input, gru.b_hidden] {
        let n = store.value(id).numel();
        let noise = randn(&mut rng, n);
        for (v, z) in store.get_mut(id).value.data_mut().iter_mut().zip(noise) {
            *v = 0.5 * z;
        }
    }
    (store, gru, rng)
}

#[test]
fn fused_run_matches_unrolled_cells() {
    let (mut store, gru, mut rng) = random_gru(11, 3, 5);
    let (b, t) = (3, 7);
    let gi = randn(&mut rng, b * t * 15);
    let upstream = randn(&mut rng, b * t * 5);
    let mut outs = Vec::new();
    for fused in [true, false] {
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::new(&[b, t, 15], gi.clone()).unwrap());
        let h = if fused {
            gru.run(&mut g, x)
        } else {
            gru.run_unrolled(&mut g, x)
        }
        .unwrap();
        let u = g.constant(Tensor::new(&[b, t, 5], upstream.clone()).unwrap());
        let p = g.mul(h, u).unwrap();
        let loss = g.sum(p);
        let hv = g.value(h).data().to_vec();
        let grads = g.backward(loss).unwrap();
        store.zero_grads();
        store.accumulate(&grads);
        let pg: Vec<f64> = [gru.w_hidden, gru.b_hidden]
            .iter()
            .flat_map(|&id| store.get_mut(id).grad.data().to_vec())
            .collect();
        outs.push((hv, pg));
    }
    for (a, b) in outs[0].0.iter().zip(&outs[1].0) {
        assert!((a - b).abs() < 1e-12, "state {a} vs {b}");
    }
    for (a, b) in outs[0].1.iter().zip(&outs[1].1) {
        assert!((a - b).abs() < 1e-10, "grad {a} vs {b}");
    }
}

#[test]
fn fused_run_passes_gradient_check() {
    let (mut store, gru, mut rng) = random_gru(12, 2, 3);
    let x = randn(&mut rng, 2 * 4 * 2);
    let target = randn(&mut rng, 2 * 4 * 3);
    let report = grad_check(&mut store, 1e-6, |g| {
        let xv = g.constant(Tensor::new(&[8, 2], x.clone())?);
        let w = g.param(gru.w_input);
        let b = g.param(gru.b_input);
        let gi = g.matmul(xv, w)?;
        let gi = g.add_row(gi, b)?;
        let gi = g.reshape(gi, &[2, 4, 9])?;
        let h = gru.run(g, gi)?;
        let tv = g.constant(Tensor::new(&[2, 4, 3], target.clone())?);
        let p = g.mul(h, tv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

/// Straight-line GRU over concatenated `[x_t ; e_t]` inputs.
fn gru_oracle(store: &ParamStore<f64>, gru: &Gru, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = gru.hidden;
    let wi = store.value(gru.w_input).data();
    let wh = store.value(gru.w_hidden).data();
    let bi = store.value(gru.b_input).data();
    let bh = store.value(gru.b_hidden).data();
    let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
    let mut h = vec![0.0; d];
    let mut out = Vec::new();
    for x in xs {
        let gi: Vec<f64> = (0..3 * d)
            .map(|o| {
                bi[o]
                    + (0..gru.input)
                        .map(|k| x[k] * wi[k * 3 * d + o])
                        .sum::<f64>()
            })
            .collect();
        let gh: Vec<f64> = (0..3 * d)
            .map(|o| bh[o] + (0..d).map(|k| h[k] * wh[k * 3 * d + o]).sum::<f64>())
            .collect();
        let next: Vec<f64> = (0..d)
            .map(|j| {
                let r = sig(gi[j] + gh[j]);
                let z = sig(gi[d + j] + gh[d + j]);
                let n = (gi[2 * d + j] + r * gh[2 * d + j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect();
        h = next;
        out.push(h.clone());
    }
    out
}

fn head_oracle(store: &ParamStore<f64>, head: &PredHead, xs: &[Vec<f64>]) -> Vec<f64> {
    let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
        let w = store.value(l.weight).data();
        let b = l
            .bias
            .map(|id| store.value(id).data().to_vec())
            .unwrap_or_else(|| vec![0.0; l.fan_out]);
        (0..l.fan_out)
            .map(|o| {
                b[o] + (0..l.fan_in)
                    .map(|k| x[k] * w[k * l.fan_out + o])
                    .sum::<f64>()
            })
            .collect()
    };
    xs.iter()
        .map(|x| {
            let h = lin(&head.hidden, x);
            let m = h.iter().sum::<f64>() / h.len() as f64;
            let v = h.iter().map(|a| (a - m).powi(2)).sum::<f64>() / h.len() as f64;
            let gm = store.value(head.norm.gamma).data();
            let bt = store.value(head.norm.beta).data();
            let h: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(i, a)| ((a - m) / (v + crate::nn::LN_EPS).sqrt() * gm[i] + bt[i]).max(0.0))
                .collect();
            lin(&head.out, &h)[0]
        })
        .collect()
}

fn branch_values(
    store: &ParamStore<f64>,
    sp: &SpanPredictor,
    feats: &[f64],
    b: usize,
    t: usize,
    bits: Option<(&[bool], &[bool])>,
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::with_params(store);
    let f = g.constant(Tensor::new(&[b, t, sp.d], feats.to_vec()).unwrap());
    let s = sp.shared(&mut g, f).unwrap();
    let out = match bits {
        None => sp.predict(&mut g, &s).unwrap(),
        Some((sb, eb)) => sp.recover(&mut g, &s, sb, eb).unwrap(),
    };
    (
        g.value(out.start).data().to_vec(),
        g.value(out.end).data().to_vec(),
    )
}

#[test]
fn branch_matches_concatenated_input_oracle() {
    let d = 4;
    let (store, sp) = setup(d, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 6;
    let feats = randn(&mut rng, t * d);
    let sbits: Vec<bool> = (0..t).map(|i| i == 2 || i == 4).collect();
    let ebits: Vec<bool> = (0..t).map(|i| i == 5).collect();
    let table = store.value(sp.labels.table).data().to_vec();
    let row = |r: usize| table[r * d..(r + 1) * d].to_vec();
    for recovering in [false, true] {
        let (s_tok, e_tok): (Vec<usize>, Vec<usize>) = if recovering {
            (
                label_tokens(&sbits, Boundary::Start),
                label_tokens(&ebits, Boundary::End),
            )
        } else {
            (vec![NULL; t], vec![NULL; t])
        };
        let xs: Vec<Vec<f64>> = (0..t)
            .map(|i| [feats[i * d..(i + 1) * d].to_vec(), row(s_tok[i])].concat())
            .collect();
        let hs = gru_oracle(&store, &sp.start_gru, &xs);
        let start = head_oracle(&store, &sp.start_head, &hs);
        let xe: Vec<Vec<f64>> = (0..t)
            .map(|i| [hs[i].clone(), row(e_tok[i])].concat())
            .collect();
        let he = gru_oracle(&store, &sp.end_gru, &xe);
        let end = head_oracle(&store, &sp.end_head, &he);
        let bits = recovering.then_some((&sbits[..], &ebits[..]));
        let (gs, ge) = branch_values(&store, &sp, &feats, 1, t, bits);
        for (a, b) in gs.iter().zip(&start).chain(ge.iter().zip(&end)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn distributions_respect_mask() {
    let (store, sp) = setup(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats = randn(&mut rng, 2 * 8 * 4);
    let mut g = Graph::with_params(&store);
    let f = g.constant(Tensor::new(&[2, 8, 4], feats).unwrap());
    let s = sp.shared(&mut g, f).unwrap();
    let logits = sp.predict(&mut g, &s).unwrap();
    let mut mask = vec![true; 16];
    mask[5..8].iter_mut().for_each(|m| *m = false);
    let outs = BranchOutput::from_logits(&g, &logits, &mask).unwrap();
    for o in &outs {
        for dist in [&o.start, &o.end] {
            assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(outs[0].start[5..]
        .iter()
        .chain(&outs[0].end[5..])
        .all(|&p| p == 0.0));
}

#[test]
fn recovering_with_null_tokens_equals_predicting() {
    let (store, sp) = setup(4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats = randn(&mut rng, 2 * 5 * 4);
    let mut g = Graph::with_params(&store);
    let f = g.constant(Tensor::new(&[2, 5, 4], feats).unwrap());
    let s = sp.shared(&mut g, f).unwrap();
    let p = sp.predict(&mut g, &s).unwrap();
    let null = vec![NULL; 10];
    let r = sp.branch(&mut g, &s, &null, &null).unwrap();
    assert_eq!(g.value(p.start).data(), g.value(r.start).data());
    assert_eq!(g.value(p.end).data(), g.value(r.end).data());
}

#[test]
fn predicting_branch_ignores_recovering_labels() {
    let (store, sp) = setup(4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feats = randn(&mut rng, 3 * 6 * 4);
    let run = |sb: &[bool], eb: &[bool]| {
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::new(&[3, 6, 4], feats.clone()).unwrap());
        let s = sp.shared(&mut g, f).unwrap();
        let p = sp.predict(&mut g, &s).unwrap();
        let r = sp.recover(&mut g, &s, sb, eb).unwrap();
        (
            g.value(p.start).data().to_vec(),
            g.value(p.end).data().to_vec(),
            g.value(r.start).data().to_vec(),
        )
    };
    let a_bits: Vec<bool> = (0..18).map(|i| i % 5 == 0).collect();
    let b_bits: Vec<bool> = (0..18).map(|i| i % 3 == 1).collect();
    let a = run(&a_bits, &b_bits);
    let b = run(&b_bits, &a_bits);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_ne!(a.2, b.2);
}

#[test]
fn branches_share_parameters_by_identity() {
    let (mut store, sp) = setup(4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let feats = randn(&mut rng, 5 * 4);
    let bits: Vec<bool> = (0..5).map(|i| i == 1).collect();
    let touched = |store: &ParamStore<f64>, recovering: bool| {
        let mut g = Graph::with_params(store);
        let f = g.constant(Tensor::new(&[1, 5, 4], feats.clone()).unwrap());
        let s = sp.shared(&mut g, f).unwrap();
        let o = if recovering {
            sp.recover(&mut g, &s, &bits, &bits).unwrap()
        } else {
            sp.predict(&mut g, &s).unwrap()
        };
        let a = g.sum(o.start);
        let b = g.sum(o.end);
        let l = g.add(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        store
            .ids()
            .filter(|&id| grads.param(id).is_some())
            .collect::<Vec<_>>()
    };
    let p = touched(&store, false);
    assert_eq!(p, touched(&store, true));
    assert_eq!(p.len(), store.len());

    let before = branch_values(&store, &sp, &feats, 1, 5, Some((&bits, &bits)));
    let before_pred = branch_values(&store, &sp, &feats, 1, 5, None);
    store
        .get_mut(sp.end_head.hidden.bias.unwrap())
        .value
        .data_mut()[0] += 1.0;
    let after = branch_values(&store, &sp, &feats, 1, 5, Some((&bits, &bits)));
    let after_pred = branch_values(&store, &sp, &feats, 1, 5, None);
    assert_ne!(before.1, after.1);
    assert_ne!(before_pred.1, after_pred.1);
    assert_eq!(before.0, after.0);
}

#[test]
fn predict_golden_vector() {
    let (store, sp) = setup(4, 2024);
    let feats: Vec<f64> = (0..6 * 4).map(|i| ((i as f64) * 0.37).sin()).collect();
    let mut g = Graph::with_params(&store);
    let f = g.constant(Tensor::new(&[1, 6, 4], feats).unwrap());
    let s = sp.shared(&mut g, f).unwrap();
    let logits = sp.predict(&mut g, &s).unwrap();
    let out = &BranchOutput::from_logits(&g, &logits, &[true; 6]).unwrap()[0];
    for (a, b) in out
        .start
        .iter()
        .zip(GOLDEN_START)
        .chain(out.end.iter().zip(GOLDEN_END))
    {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

const GOLDEN_START: [f64; 6] = [
    0.18410199006536157,
    0.18341440747065194,
    0.15062419032838023,
    0.1262732936966998,
    0.1546549300804245,
    0.20093118835848203,
];
const GOLDEN_END: [f64; 6] = [
    0.2614017695895978,
    0.2255790113073961,
    0.14737723620415538,
    0.11468196353417154,
    0.12061004391360235,
    0.13034997545107674,
];

/// Brute force: sort every valid pair by probability then position.
fn brute_force_span(out: &BranchOutput) -> Option<(usize, usize)> {
    let t = out.valid.len();
    let mut pairs: Vec<(f64, usize, usize)> = (0..t)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .filter(|&(i, j)| i <= j && out.valid[i] && out.valid[j])
        .map(|(i, j)| (out.start[i] * out.end[j], i, j))
        .collect();
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    pairs.first().map(|&(_, i, j)| (i, j))
}

fn one_hot(t: usize, i: usize) -> Vec<f64> {
    (0..t).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

#[test]
fn select_span_examples() {
    let out = BranchOutput {
        start: one_hot(10, 3),
        end: one_hot(10, 7),
        valid: vec![true; 10],
    };
    assert_eq!(select_span(&out).unwrap(), (3, 7));
    let mut start = vec![0.02; 10];
    start[7] = 0.82;
    let mut end = vec![0.02; 10];
    end[3] = 0.82;
    let out = BranchOutput {
        start,
        end,
        valid: vec![true; 10],
    };
    let (i, j) = select_span(&out).unwrap();
    assert!(i <= j);
    assert_eq!(Some((i, j)), brute_force_span(&out));
    let empty = BranchOutput {
        start: vec![0.5; 2],
        end: vec![0.5; 2],
        valid: vec![false; 2],
    };
    assert!(select_span(&empty).is_err());
}

#[test]
fn select_span_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let valid_len = rng.random_range(1..=16);
        let valid: Vec<bool> = (0..16).map(|i| i < valid_len).collect();
        let start = crate::autodiff::prob::masked_softmax(&randn(&mut rng, 16), &valid).unwrap();
        let end = crate::autodiff::prob::masked_softmax(&randn(&mut rng, 16), &valid).unwrap();
        let out = BranchOutput { start, end, valid };
        assert_eq!(Some(select_span(&out).unwrap()), brute_force_span(&out));
    }
}

proptest! {
    #[test]
    fn select_span_is_ordered_and_valid(
        start in proptest::collection::vec(0.0f64..1.0, 12),
        end in proptest::collection::vec(0.0f64..1.0, 12),
        valid in proptest::collection::vec(any::<bool>(), 12),
    ) {
        prop_assume!(valid.iter().any(|&v| v));
        let out = BranchOutput { start, end, valid: valid.clone() };
        let (i, j) = select_span(&out).unwrap();
        prop_assert!(i <= j);
        prop_assert!(valid[i] && valid[j]);
    }
}
