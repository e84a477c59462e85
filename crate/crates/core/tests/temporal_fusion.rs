//! Adjacent-frame fusion checked against closed forms, a plain-loop
//! attention oracle, and a hand-unrolled sweep trace.

use duoview_core::temporal::{cross_attention, TemporalConfig, TemporalFuser};
use duoview_core::CoreError;
use duoview_tensor::nn::{ParamStore, Session};
use duoview_tensor::TensorId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn rand_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn single_key_value_attention_returns_the_value() {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let q = s.g.constant(vec![0.3, -1.2, 0.8], &[1, 3]);
    let k = s.g.constant(vec![2.0, 0.1, -0.4], &[1, 3]);
    let v = s.g.constant(vec![5.0, -7.0], &[1, 2]);
    let out = cross_attention(&mut s, q, k, v).unwrap();
    assert_eq!(s.g.data(out), &[5.0, -7.0]);
}

#[test]
fn identical_keys_average_the_values() {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let q = s.g.constant(vec![0.9, 0.2], &[1, 2]);
    let k = s.g.constant(vec![1.0, -1.0, 1.0, -1.0], &[2, 2]);
    let v = s.g.constant(vec![2.0, 4.0, 6.0, -4.0], &[2, 2]);
    let out = cross_attention(&mut s, q, k, v).unwrap();
    let got = s.g.data(out);
    assert!((got[0] - 4.0).abs() < 1e-12);
    assert!((got[1] - 0.0).abs() < 1e-12);
}

#[test]
fn random_attention_matches_softmax_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(20);
    let (nq, nk, d, cv) = (2, 3, 4, 3);
    let qv = rand_vec(&mut rng, nq * d);
    let kv = rand_vec(&mut rng, nk * d);
    let vv = rand_vec(&mut rng, nk * cv);
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let q = s.g.constant(qv.clone(), &[nq, d]);
    let k = s.g.constant(kv.clone(), &[nk, d]);
    let v = s.g.constant(vv.clone(), &[nk, cv]);
    let out = cross_attention(&mut s, q, k, v).unwrap();
    let got = s.g.data(out);

    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|t| qv[i * d + t] * kv[j * d + t]).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for c in 0..cv {
            let want: f64 = (0..nk).map(|j| exps[j] / z * vv[j * cv + c]).sum();
            assert!((got[i * cv + c] - want).abs() < 1e-6, "({i}, {c})");
        }
    }
}

fn build_fuser(
    store: &mut ParamStore,
    seed: u64,
    channels: usize,
    in_channels: usize,
    attn_dim: usize,
) -> TemporalFuser {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cfg = TemporalConfig { channels, in_channels, attn_dim };
    TemporalFuser::init(store, &mut rng, "fuse", cfg).unwrap()
}

#[test]
fn gamma_starts_at_zero_making_integration_the_identity() {
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 21, 3, 3, 4);
    assert_eq!(store.get("fuse.gamma").unwrap().array.data(), &[0.0]);
    let mut rng = ChaCha12Rng::seed_from_u64(22);
    let (nx, ny) = (4, 5);
    let maps: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 3 * nx * ny)).collect();

    let mut s = Session::new(&store);
    let ids: Vec<TensorId> =
        maps.iter().map(|m| s.g.constant(m.clone(), &[3, nx, ny])).collect();
    let pair = fuser.affm(&mut s, ids[1], ids[0]).unwrap();
    assert_eq!(s.g.data(pair), maps[0].as_slice(), "affm must be exact at gamma 0");
    let fused = fuser.integrate(&mut s, &ids).unwrap();
    assert_eq!(fused.affm_calls, 8);
    assert_eq!(s.g.data(fused.data), maps[0].as_slice(), "integrate must return f_0");
}

#[test]
fn constant_fields_scale_by_one_plus_gamma() {
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 23, 3, 3, 4);
    store.get_mut("fuse.gamma").unwrap().array.data_mut()[0] = 0.7;
    let (nx, ny) = (3, 4);
    let per_channel = [2.0, -1.5, 0.25];
    let mut data = vec![0.0; 3 * nx * ny];
    for c in 0..3 {
        for p in 0..nx * ny {
            data[c * nx * ny + p] = per_channel[c];
        }
    }
    let mut s = Session::new(&store);
    let f = s.g.constant(data, &[3, nx, ny]);
    let out = fuser.affm(&mut s, f, f).unwrap();
    let got = s.g.data(out);
    for c in 0..3 {
        for p in 0..nx * ny {
            let want = per_channel[c] * 1.7;
            assert!((got[c * nx * ny + p] - want).abs() < 1e-9, "channel {c} cell {p}");
        }
    }
}

#[test]
fn affm_matches_plain_loop_oracle() {
    let (c, d, nx, ny) = (3, 4, 4, 5);
    let p = nx * ny;
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 24, c, c, d);
    store.get_mut("fuse.gamma").unwrap().array.data_mut()[0] = 0.6;
    let mut rng = ChaCha12Rng::seed_from_u64(25);
    let fi = rand_vec(&mut rng, c * p);
    let fj = rand_vec(&mut rng, c * p);

    let mut s = Session::new(&store);
    let ti = s.g.constant(fi.clone(), &[c, nx, ny]);
    let tj = s.g.constant(fj.clone(), &[c, nx, ny]);
    let out = fuser.affm(&mut s, ti, tj).unwrap();
    let got = s.g.data(out);

    let wq = store.get("fuse.q_proj.weight").unwrap().array.data().to_vec();
    let bq = store.get("fuse.q_proj.bias").unwrap().array.data().to_vec();
    let wk = store.get("fuse.k_proj.weight").unwrap().array.data().to_vec();
    let bk = store.get("fuse.k_proj.bias").unwrap().array.data().to_vec();
    let gamma = 0.6;
    let row = |m: &[f64], cell: usize| -> Vec<f64> { (0..c).map(|ch| m[ch * p + cell]).collect() };
    let attend = |src: &[f64], q: &[f64], ix: i64, iy: i64| -> Vec<f64> {
        let mut scores = Vec::new();
        let mut cells = Vec::new();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let (jx, jy) = (ix + dx, iy + dy);
                if jx < 0 || jx >= nx as i64 || jy < 0 || jy >= ny as i64 {
                    continue;
                }
                let cell = (jx * ny as i64 + jy) as usize;
                let f = row(src, cell);
                let k: Vec<f64> = (0..d)
                    .map(|o| bk[o] + (0..c).map(|i| wk[o * c + i] * f[i]).sum::<f64>())
                    .collect();
                let score: f64 = (0..d).map(|o| q[o] * k[o]).sum::<f64>() / (d as f64).sqrt();
                scores.push(score);
                cells.push(cell);
            }
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut out = vec![0.0; c];
        for (w, &cell) in exps.iter().zip(&cells) {
            let f = row(src, cell);
            for ch in 0..c {
                out[ch] += w / z * f[ch];
            }
        }
        out
    };
    for ix in 0..nx {
        for iy in 0..ny {
            let cell = ix * ny + iy;
            let mut cat = row(&fi, cell);
            cat.extend(row(&fj, cell));
            let q: Vec<f64> = (0..d)
                .map(|o| bq[o] + (0..2 * c).map(|i| wq[o * 2 * c + i] * cat[i]).sum::<f64>())
                .collect();
            let ai = attend(&fi, &q, ix as i64, iy as i64);
            let aj = attend(&fj, &q, ix as i64, iy as i64);
            for ch in 0..c {
                let want = fj[ch * p + cell] + gamma * 0.5 * (ai[ch] + aj[ch]);
                let have = got[ch * p + cell];
                assert!((have - want).abs() < 1e-6, "cell ({ix}, {iy}) ch {ch}: {have} vs {want}");
            }
        }
    }
}

#[test]
fn integrate_matches_hand_unrolled_trace() {
    let (c, nx, ny) = (3, 3, 4);
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 26, c, c, 4);
    store.get_mut("fuse.gamma").unwrap().array.data_mut()[0] = 0.4;
    let mut rng = ChaCha12Rng::seed_from_u64(27);
    let maps: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, c * nx * ny)).collect();

    let mut s1 = Session::new(&store);
    let ids: Vec<TensorId> =
        maps.iter().map(|m| s1.g.constant(m.clone(), &[c, nx, ny])).collect();
    let fused = fuser.integrate(&mut s1, &ids).unwrap();
    assert_eq!(fused.affm_calls, 6);
    let got = s1.g.data(fused.data).to_vec();

    // The same six applications written out one by one.
    let mut s2 = Session::new(&store);
    let f0 = s2.g.constant(maps[0].clone(), &[c, nx, ny]);
    let f1 = s2.g.constant(maps[1].clone(), &[c, nx, ny]);
    let f2 = s2.g.constant(maps[2].clone(), &[c, nx, ny]);
    let f3 = s2.g.constant(maps[3].clone(), &[c, nx, ny]);
    let b1 = fuser.affm(&mut s2, f0, f1).unwrap();
    let b2 = fuser.affm(&mut s2, b1, f2).unwrap();
    let b3 = fuser.affm(&mut s2, b2, f3).unwrap();
    let w2 = fuser.affm(&mut s2, b3, b2).unwrap();
    let w1 = fuser.affm(&mut s2, w2, b1).unwrap();
    let w0 = fuser.affm(&mut s2, w1, f0).unwrap();
    assert_eq!(got, s2.g.data(w0).to_vec(), "trace must be bit-identical");
}

#[test]
fn integrate_validates_and_counts_calls() {
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 28, 2, 2, 3);
    let mut s = Session::new(&store);
    match fuser.integrate(&mut s, &[]) {
        Err(CoreError::Validation { what, .. }) => assert_eq!(what, "temporal window"),
        _ => panic!("empty window must be a validation error"),
    }
    let mut rng = ChaCha12Rng::seed_from_u64(29);
    for n in [1usize, 2, 3, 5] {
        let ids: Vec<TensorId> = (0..n)
            .map(|_| {
                let data = rand_vec(&mut rng, 2 * 3 * 3);
                s.g.constant(data, &[2, 3, 3])
            })
            .collect();
        let fused = fuser.integrate(&mut s, &ids).unwrap();
        assert_eq!(fused.affm_calls, 2 * (n - 1));
        if n == 1 {
            assert_eq!(fused.data, ids[0], "single frame passes through untouched");
        }
    }
}

#[test]
fn repeated_applications_share_parameter_leaves() {
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 30, 2, 2, 3);
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let mut s = Session::new(&store);
    let ids: Vec<TensorId> = (0..3)
        .map(|_| {
            let data = rand_vec(&mut rng, 2 * 4 * 4);
            s.g.constant(data, &[2, 4, 4])
        })
        .collect();
    let a = fuser.affm(&mut s, ids[0], ids[1]).unwrap();
    let q1 = s.bound_id("fuse.q_proj.weight").unwrap();
    let g1 = s.bound_id("fuse.gamma").unwrap();
    let _b = fuser.affm(&mut s, a, ids[2]).unwrap();
    assert_eq!(s.bound_id("fuse.q_proj.weight").unwrap(), q1);
    assert_eq!(s.bound_id("fuse.gamma").unwrap(), g1);
}

#[test]
fn gamma_gradient_matches_finite_differences() {
    let (c, nx, ny) = (2, 3, 3);
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 32, c, c, 3);
    store.get_mut("fuse.gamma").unwrap().array.data_mut()[0] = 0.3;
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    let maps: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, c * nx * ny)).collect();
    let probe = rand_vec(&mut rng, c * nx * ny);

    let eval = |st: &ParamStore| -> (f64, Option<Vec<f64>>) {
        let mut s = Session::new(st);
        let ids: Vec<TensorId> =
            maps.iter().map(|m| s.g.constant(m.clone(), &[c, nx, ny])).collect();
        let fused = fuser.integrate(&mut s, &ids).unwrap();
        let pr = s.g.constant(probe.clone(), &[c, nx, ny]);
        let prod = s.g.mul(fused.data, pr);
        let loss = s.g.sum_all(prod);
        let v = s.g.scalar_value(loss);
        let grads = s.backward(loss).unwrap();
        (v, grads.get("fuse.gamma").map(|g| g.to_vec()))
    };
    let (_, analytic) = eval(&store);
    let analytic = analytic.expect("gamma must receive gradient");
    let x0 = vec![0.3];
    duoview_tensor::assert_grad_close(
        |x| {
            let mut st = store.clone();
            st.get_mut("fuse.gamma").unwrap().array.data_mut()[0] = x[0];
            eval(&st).0
        },
        &x0,
        &analytic,
        1e-5,
        1e-3,
        "fuse.gamma",
    );
}

#[test]
fn width_adapter_feeds_mismatched_inputs() {
    let mut store = ParamStore::new();
    let fuser = build_fuser(&mut store, 34, 3, 5, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(35);
    let (nx, ny) = (3, 3);
    let maps: Vec<Vec<f64>> = (0..2).map(|_| rand_vec(&mut rng, 5 * nx * ny)).collect();
    let mut s = Session::new(&store);
    let ids: Vec<TensorId> =
        maps.iter().map(|m| s.g.constant(m.clone(), &[5, nx, ny])).collect();
    let fused = fuser.integrate(&mut s, &ids).unwrap();
    assert_eq!(s.g.shape(fused.data), &[3, nx, ny]);

    // With gamma at zero the result is exactly the adapted current frame.
    let wa = store.get("fuse.adapter.weight").unwrap().array.data().to_vec();
    let ba = store.get("fuse.adapter.bias").unwrap().array.data().to_vec();
    let got = s.g.data(fused.data);
    for ch in 0..3 {
        for p in 0..nx * ny {
            let want: f64 =
                ba[ch] + (0..5).map(|i| wa[ch * 5 + i] * maps[0][i * nx * ny + p]).sum::<f64>();
            assert!((got[ch * nx * ny + p] - want).abs() < 1e-12, "ch {ch} cell {p}");
        }
    }
}
