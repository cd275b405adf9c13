use std::path::Path;

use atd_core::atd::{
    alternate_fuse, atd_weights, guidance_matrix, integrate, normalize, similarity, telescopic_displace, AtdConfig,
    AtdParams, NormalizedFeature,
};
use atd_core::data::{parse_series_csv, series_csv_string, split, windowize, SeriesDataset, SeriesRow};
use atd_core::encoders::{
    conv_out_dims, encode_image, encode_series, lstm_step, residual_block, ConvParams, ConvSpec, ImageEncoderConfig,
    LstmParams, ResidualBlockParams, SeriesEncoderConfig,
};
use atd_core::graph::{Graph, Var};
use atd_core::params::ParamStore;
use atd_core::tensor_file::{decode_tensor, encode_tensor};
use atd_core::{Fill, Rng, Tensor};
use proptest::prelude::*;

fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::create(shape, Fill::Uniform { rng, lo: -scale, hi: scale }).unwrap()
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let n = t.shape()[1];
    t.data().chunks(n).collect()
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_shape_algebra(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[m, k], 1.0));
        let b = g.constant(rand_tensor(&mut rng, &[k, n], 1.0));
        let c = g.matmul(a, b).unwrap();
        prop_assert_eq!(g.shape(c), &[m, n]);
        let bad = g.constant(rand_tensor(&mut rng, &[k + 1, n], 1.0));
        prop_assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..5, c in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[r, c], scale));
        let s = g.softmax_rows(a).unwrap();
        for row in rows(g.value(s)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_ignores_row_constants(r in 1usize..5, c in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = rand_tensor(&mut rng, &[r, c], 5.0);
        let shifts: Vec<f64> = (0..r).map(|_| rng.uniform(-100.0, 100.0)).collect();
        let shifted: Vec<f64> = a.data().iter().enumerate().map(|(i, v)| v + shifts[i / c]).collect();
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let y = g.constant(Tensor::from_vec(&[r, c], shifted).unwrap());
        let (sx, sy) = (g.softmax_rows(x).unwrap(), g.softmax_rows(y).unwrap());
        prop_assert!(g.value(sx).max_abs_diff(g.value(sy)).unwrap() < 1e-12);
    }

    #[test]
    fn gradients_from_two_uses_add_up(n in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&mut rng, &[n], 2.0);
        let p = rand_tensor(&mut rng, &[n], 1.0);
        let q = rand_tensor(&mut rng, &[n], 1.0);
        let path = |g: &mut Graph, x: Var, which: u8| {
            let y = if which == 0 { g.tanh(x) } else { g.sigmoid(x) };
            let w = g.constant(if which == 0 { p.clone() } else { q.clone() });
            let m = g.mul(y, w).unwrap();
            g.sum(m)
        };
        let single = |which: u8| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let l = path(&mut g, xv, which);
            g.backward(l).unwrap();
            g.grad(xv).unwrap().to_vec()
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let a = path(&mut g, xv, 0);
        let b = path(&mut g, xv, 1);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        let (ga, gb) = (single(0), single(1));
        for ((&both, a), b) in g.grad(xv).unwrap().iter().zip(ga).zip(gb) {
            prop_assert!((both - (a + b)).abs() <= 1e-15);
        }
    }

    #[test]
    fn seeded_fills_are_bitwise_reproducible(seed in any::<u64>(), n in 1usize..50) {
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            let u = Tensor::create(&[n], Fill::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 }).unwrap();
            let g = Tensor::create(&[n], Fill::Gaussian { rng: &mut rng, mean: 0.0, std: 1.0 }).unwrap();
            u.data().iter().chain(g.data()).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(seed), draw(seed));
    }

    #[test]
    fn conv_geometry_stays_in_bounds(h1 in 1usize..20, f in 1usize..7, s in 1usize..4, p in 0usize..4) {
        if let Ok((h2, w2)) = conv_out_dims(h1, h1, f, s, p) {
            prop_assert_eq!(h2, w2);
            prop_assert!(h2 >= 1);
            prop_assert!(s * (h2 - 1) + f - 1 < h1 + 2 * p);
            // the same bound with the padding offset removed from the index
            prop_assert!((s * (h2 - 1) + f - 1) as isize - (p as isize) < (h1 + p) as isize);
            let mut rng = Rng::new(h1 as u64);
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[1, h1, h1], 1.0));
            let k = g.constant(rand_tensor(&mut rng, &[1, 1, f, f], 1.0));
            let b = g.constant(Tensor::zeros(&[1]).unwrap());
            let y = g.conv2d(x, k, b, s, p).unwrap();
            prop_assert_eq!(g.shape(y), &[1, h2, w2]);
        } else {
            prop_assert!(f > h1 + 2 * p);
        }
    }

    #[test]
    fn residual_block_with_zero_params_is_identity(c in 1usize..4, h in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rand_tensor(&mut rng, &[c, h, h], 3.0);
        let mut g = Graph::new();
        let spec = ConvSpec::same(c, c, 3);
        let conv = |g: &mut Graph| {
            let k = g.param(Tensor::zeros(&[c, c, 3, 3]).unwrap());
            let b = g.param(Tensor::zeros(&[c]).unwrap());
            ConvParams::new(g, spec, k, b).unwrap()
        };
        let (a, b) = (conv(&mut g), conv(&mut g));
        let xv = g.constant(x.clone());
        let y = residual_block(&mut g, xv, &ResidualBlockParams::new(a, b).unwrap()).unwrap();
        prop_assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn lstm_with_zero_params_has_closed_form(hidden in 1usize..6, input in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let w: Vec<Var> = (0..4).map(|_| g.param(Tensor::zeros(&[hidden, hidden + input]).unwrap())).collect();
        let b: Vec<Var> = (0..4).map(|_| g.param(Tensor::zeros(&[hidden]).unwrap())).collect();
        let p = LstmParams::new(&g, [w[0], w[1], w[2], w[3]], [b[0], b[1], b[2], b[3]]).unwrap();
        let x = g.constant(rand_tensor(&mut rng, &[input], 5.0));
        let h = g.constant(rand_tensor(&mut rng, &[hidden], 1.0));
        let c_prev = rand_tensor(&mut rng, &[hidden], 4.0);
        let c = g.constant(c_prev.clone());
        let (h_t, c_t) = lstm_step(&mut g, x, h, c, &p).unwrap();
        for ((&hv, &cv), &cp) in g.value(h_t).data().iter().zip(g.value(c_t).data()).zip(c_prev.data()) {
            prop_assert!((cv - 0.5 * cp).abs() < 1e-12);
            prop_assert!((hv - 0.5 * (0.5 * cp).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn encoders_stay_finite(seed in any::<u64>(), scale in 1.0f64..20.0) {
        let mut rng = Rng::new(seed);
        let series = SeriesEncoderConfig { input_dim: 3, hidden: 4, d: 4 };
        let image = ImageEncoderConfig { in_channels: 2, channels: 3, kernel_size: 3, blocks: 2, d: 4 };
        let mut store = ParamStore::new();
        series.init(&mut store, "s", &mut rng).unwrap();
        image.init(&mut store, "v", &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = rng.uniform(-scale, scale);
            }
        }
        let seq = rand_tensor(&mut rng, &[5, 3], 100.0 * scale);
        let img = rand_tensor(&mut rng, &[2, 6, 6], 100.0 * scale);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let sp = series.bind(&g, &bound, "s").unwrap();
        let ip = image.bind(&g, &bound, "v").unwrap();
        let a = encode_series(&mut g, &seq, &sp).unwrap();
        let b = encode_image(&mut g, &img, &ip).unwrap();
        prop_assert!(g.value(a.var()).is_finite());
        prop_assert!(g.value(b.var()).is_finite());
    }

    #[test]
    fn normalize_standardizes_rows(r in 1usize..5, d in 2usize..10, spread in 0.0f64..6.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scale = 10f64.powf(spread - 3.0);
        let offset = rng.uniform(-50.0, 50.0);
        let data: Vec<f64> = (0..r * d).map(|_| offset + rng.uniform(-scale, scale)).collect();
        let x = Tensor::from_vec(&[r, d], data).unwrap();
        let eps = 1e-5;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let n = normalize(&mut g, xv, eps).unwrap();
        for (row, orig) in rows(g.value(n.var())).into_iter().zip(rows(&x)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-7);
            let om = orig.iter().sum::<f64>() / d as f64;
            let sigma2 = orig.iter().map(|v| (v - om).powi(2)).sum::<f64>() / d as f64;
            if sigma2 >= 1e-3 {
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assert!((var - sigma2 / (sigma2 + eps)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn guidance_and_weights_invariants(m in 1usize..5, n in 1usize..6, d in 2usize..9, d_h in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[m, d], 3.0));
        let b = g.constant(rand_tensor(&mut rng, &[n, d], 3.0));
        let (na, nb) = (normalize(&mut g, a, 1e-5).unwrap(), normalize(&mut g, b, 1e-5).unwrap());
        let s = similarity(&mut g, &na, &nb).unwrap();
        let gm = guidance_matrix(&mut g, &na, &nb).unwrap();
        let w = atd_weights(&mut g, gm, d_h).unwrap();

        for row in rows(g.value(gm)) {
            prop_assert_eq!(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0);
            prop_assert!(row.iter().all(|&v| v <= 0.0));
        }
        let s_val = g.value(s).clone();
        for (wr, sr) in rows(g.value(w)).into_iter().zip(rows(&s_val)) {
            prop_assert!((wr.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(wr.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert_eq!(first_argmax(wr), first_argmax(sr));
        }

        // G is unchanged when S gains a per-row constant
        let shifts: Vec<f64> = (0..m).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let shifted: Vec<f64> = s_val.data().iter().enumerate().map(|(i, v)| v + shifts[i / n]).collect();
        let sv = g.constant(Tensor::from_vec(&[m, n], shifted).unwrap());
        let g2 = g.sub_row_max(sv).unwrap();
        prop_assert!(g.value(g2).max_abs_diff(g.value(gm)).unwrap() < 1e-12);
    }

    #[test]
    fn integration_stays_in_value_hull(m in 1usize..5, n in 1usize..6, d in 2usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut rng, &[m, d], 2.0));
        let b = g.constant(rand_tensor(&mut rng, &[n, d], 2.0));
        let v = g.constant(rand_tensor(&mut rng, &[d, d], 1.0));
        let na = NormalizedFeature::assume(&g, a).unwrap();
        let nb = NormalizedFeature::assume(&g, b).unwrap();
        let gm = guidance_matrix(&mut g, &na, &nb).unwrap();
        let w = atd_weights(&mut g, gm, d).unwrap();
        let o = integrate(&mut g, w, &nb, v).unwrap();
        let values = g.matmul(b, v).unwrap();
        let vals = rows(g.value(values));
        for row in rows(g.value(o)) {
            for (j, &x) in row.iter().enumerate() {
                let lo = vals.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = vals.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn displacement_is_affine_in_alpha(m in 1usize..4, d in 2usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let o = rand_tensor(&mut rng, &[m, d], 1.0);
        let x1 = rand_tensor(&mut rng, &[m, d], 1.0);
        let x2 = rand_tensor(&mut rng, &[m, d], 1.0);
        let wf = rand_tensor(&mut rng, &[d, d], 1.0);
        let bf = rand_tensor(&mut rng, &[d], 1.0);
        let cfg = AtdConfig { d, d_h: d, rounds: 1, epsilon: 1e-5 };
        let run = |raw: f64, wf: &Tensor, bf: &Tensor| {
            let mut g = Graph::new();
            let vs: Vec<Var> = [&o, &x1, &x2].iter().map(|t| g.constant((*t).clone())).collect();
            let v = g.constant(Tensor::zeros(&[d, d]).unwrap());
            let w = g.constant(wf.clone());
            let b = g.constant(bf.clone());
            let a = g.constant(Tensor::from_vec(&[1], vec![raw]).unwrap());
            let p = AtdParams::new(&g, cfg, v, w, b, a).unwrap();
            let n1 = NormalizedFeature::assume(&g, vs[1]).unwrap();
            let n2 = NormalizedFeature::assume(&g, vs[2]).unwrap();
            let out = telescopic_displace(&mut g, vs[0], &n1, &n2, &p).unwrap();
            g.value(out).data().to_vec()
        };
        let alpha = |raw: f64| 1.0 / (1.0 + (-raw).exp());
        let raws = [-1.5, 0.3, 2.0];
        let outs: Vec<Vec<f64>> = raws.iter().map(|&r| run(r, &wf, &bf)).collect();
        let (a0, a1, a2) = (alpha(raws[0]), alpha(raws[1]), alpha(raws[2]));
        for ((y0, y1), y2) in outs[0].iter().zip(&outs[1]).zip(&outs[2]) {
            let predicted = y0 + (a2 - a0) / (a1 - a0) * (y1 - y0);
            prop_assert!((predicted - y2).abs() < 1e-10);
        }

        let zero_w = Tensor::zeros(&[d, d]).unwrap();
        let zero_b = Tensor::zeros(&[d]).unwrap();
        let blend = run(0.7, &zero_w, &zero_b);
        let a = alpha(0.7);
        for ((&y, &u), &v) in blend.iter().zip(x1.data()).zip(x2.data()) {
            prop_assert_eq!(y, u * a + v * (-a + 1.0));
        }
    }

    #[test]
    fn fusion_is_deterministic(rounds in 1usize..4, d in 2usize..7, seed in any::<u64>()) {
        let cfg = AtdConfig { d, d_h: d, rounds, epsilon: 1e-5 };
        let run = || {
            let mut rng = Rng::new(seed);
            let mut store = ParamStore::new();
            cfg.init(&mut store, "atd", &mut rng).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let p = cfg.bind(&g, &bound, "atd").unwrap();
            let a = g.constant(rand_tensor(&mut rng, &[2, d], 1.0));
            let b = g.constant(rand_tensor(&mut rng, &[2, d], 1.0));
            let z = alternate_fuse(&mut g, a, b, &p).unwrap();
            g.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn windowize_counts_and_targets(len in 1usize..60, t in 1usize..10, h in 1usize..5) {
        let rows: Vec<SeriesRow> = (0..len)
            .map(|i| SeriesRow { timestamp: i.to_string(), target: i as f64, features: [i as f64; 6] })
            .collect();
        let ds = SeriesDataset { rows };
        match windowize(&ds, t, h) {
            Ok(samples) => {
                prop_assert!(len >= t + h);
                prop_assert_eq!(samples.len(), len - t - h + 1);
                for (i, (w, y)) in samples.iter().enumerate() {
                    prop_assert_eq!(w.shape(), &[t, 7]);
                    prop_assert_eq!(w.row(t - 1)[0], (i + t - 1) as f64);
                    prop_assert_eq!(*y, (i + t - 1 + h) as f64);
                    prop_assert!(i + t - 1 + h < len);
                }
            }
            Err(_) => prop_assert!(len < t + h),
        }
    }

    #[test]
    fn tensor_file_round_trip(shape in proptest::collection::vec(1usize..5, 0..5), exp in -20i32..20, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scale = 2f64.powi(exp);
        let t = rand_tensor(&mut rng, &shape, scale);
        let back = decode_tensor(&encode_tensor(&t).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (&v, &r) in t.data().iter().zip(back.data()) {
            let single = v as f32;
            let ulp = (f32::from_bits(single.abs().to_bits() + 1) - single.abs()) as f64;
            prop_assert!((v - r).abs() <= ulp);
        }
    }

    #[test]
    fn csv_round_trip(values in proptest::collection::vec(proptest::array::uniform7(-1e6f64..1e6), 1..20)) {
        let rows: Vec<SeriesRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| SeriesRow {
                timestamp: format!("2016-07-01 {i:02}:00:00"),
                target: v[0],
                features: [v[1], v[2], v[3], v[4], v[5], v[6]],
            })
            .collect();
        let ds = SeriesDataset { rows };
        let back = parse_series_csv(&series_csv_string(&ds), Path::new("mem")).unwrap();
        prop_assert_eq!(back.len(), ds.len());
        for (a, b) in ds.rows.iter().zip(&back.rows) {
            prop_assert_eq!(&a.timestamp, &b.timestamp);
            prop_assert!((a.target - b.target).abs() <= 1e-12);
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b) = split(&items, frac, seed).unwrap();
        prop_assert!(!a.is_empty() && !b.is_empty());
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items.clone());
        prop_assert_eq!(split(&items, frac, seed).unwrap(), (a, b));
    }
}
