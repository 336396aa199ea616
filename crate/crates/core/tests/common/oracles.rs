//! Library results against direct loop implementations on random inputs.
//! Each check panics on the first mismatch.

use protokd::losses::{self, KdOptions, KlDirection, LabelMap, DICE_EPS};
use protokd::model::{backbone_forward, init_params, predict, SegNetConfig};
use protokd::ndcore::{evaluate, evaluate_tensor, Tensor};
use protokd::proto::{
    compute_prototypes, i2fv_map, i2fv_pipeline_value, proto_kd_value, FeatureMap, ProtoMode,
    COSINE_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-12;
pub const INSTANCES: usize = 120;

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    r.set_stream(stream);
    r
}

fn randn(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect()
}

fn rand_labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * 1f64.max(a.abs()).max(b.abs())
}

// ---- naive oracles -------------------------------------------------------

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn oracle_prototypes(
    f: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    k: usize,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut protos = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        counts[y[i]] += 1;
        for j in 0..d {
            protos[y[i]][j] += f[i * d + j];
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for j in 0..d {
                protos[c][j] /= counts[c] as f64;
            }
        }
    }
    (protos, counts.iter().map(|&c| c > 0).collect())
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

fn oracle_i2fv(f: &[f64], n: usize, d: usize, protos: &[Vec<f64>], valid: &[bool]) -> Vec<f64> {
    let k = protos.len();
    let mut m = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            if valid[c] {
                m[i * k + c] = oracle_cos(&f[i * d..(i + 1) * d], &protos[c]);
            }
        }
    }
    m
}

fn oracle_proto_loss(ms: &[f64], mt: &[f64], n: usize, valid: &[bool]) -> f64 {
    let k = valid.len();
    let kv = valid.iter().filter(|&&v| v).count();
    let mut s = 0.0;
    for i in 0..n {
        for c in 0..k {
            if valid[c] {
                s += (ms[i * k + c] - mt[i * k + c]).powi(2);
            }
        }
    }
    s / (n * kv) as f64
}

fn oracle_intra_loss(ms: &[f64], mt: &[f64], n: usize, k: usize, y: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        s += (ms[i * k + y[i]] - mt[i * k + y[i]]).powi(2);
    }
    s / n as f64
}

fn oracle_dice(z: &[f64], n: usize, k: usize, y: &[usize], eps: f64) -> f64 {
    let p: Vec<Vec<f64>> = (0..n).map(|i| softmax(&z[i * k..(i + 1) * k])).collect();
    let mut total = 0.0;
    for c in 0..k {
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let g = if y[i] == c { 1.0 } else { 0.0 };
            inter += p[i][c] * g;
            pp += p[i][c] * p[i][c];
            gg += g * g;
        }
        total += (2.0 * inter + eps) / (pp + gg + eps);
    }
    1.0 - total / k as f64
}

fn oracle_kd(s: &[f64], t: &[f64], n: usize, k: usize, temp: f64, dir: KlDirection) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let ps = softmax(
            &s[i * k..(i + 1) * k]
                .iter()
                .map(|x| x / temp)
                .collect::<Vec<_>>(),
        );
        let pt = softmax(
            &t[i * k..(i + 1) * k]
                .iter()
                .map(|x| x / temp)
                .collect::<Vec<_>>(),
        );
        for c in 0..k {
            total += match dir {
                KlDirection::StudentFirst => ps[c] * (ps[c].ln() - pt[c].ln()),
                KlDirection::Classic => pt[c] * (pt[c].ln() - ps[c].ln()),
            };
        }
    }
    total / n as f64
}

/// Zero-padded "same" cross-correlation, `C×H×W` with `O×C×k×k`.
fn oracle_conv(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kern: &[f64],
    o: usize,
    ks: usize,
) -> Vec<f64> {
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ic in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += kern[((oc * c + ic) * ks + ky) * ks + kx]
                                * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = s;
            }
        }
    }
    out
}

// ---- checks --------------------------------------------------------------

pub const CHECKS: &[(&str, fn())] = &[
    ("prototypes_match_class_means", prototypes_match_class_means),
    (
        "i2fv_matches_pairwise_cosines",
        i2fv_matches_pairwise_cosines,
    ),
    (
        "proto_loss_matches_masked_mean_square",
        proto_loss_matches_masked_mean_square,
    ),
    ("dice_loss_matches_loop", dice_loss_matches_loop),
    (
        "kd_loss_matches_loop_in_both_directions",
        kd_loss_matches_loop_in_both_directions,
    ),
    ("conv2d_matches_loop", conv2d_matches_loop),
    ("network_forward_matches_loop", network_forward_matches_loop),
];

pub fn prototypes_match_class_means() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let (n, d, k) = (
            r.random_range(1..40),
            r.random_range(1..9),
            r.random_range(2..5),
        );
        let f = randn(&mut r, n * d, 1.5);
        let y = rand_labels(&mut r, n, k);
        let got = compute_prototypes(
            &FeatureMap::new(Tensor::new(vec![n, d], f.clone()).unwrap()).unwrap(),
            &LabelMap::new(y.clone()),
            k,
        )
        .unwrap();
        let (want, valid) = oracle_prototypes(&f, n, d, &y, k);
        assert_eq!(got.valid, valid);
        for c in 0..k {
            for j in 0..d {
                assert!(close(got.prototypes.data()[c * d + j], want[c][j]));
            }
        }
    }
}

pub fn i2fv_matches_pairwise_cosines() {
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let (n, d, k) = (
            r.random_range(1..40),
            r.random_range(1..9),
            r.random_range(2..5),
        );
        let f = randn(&mut r, n * d, 1.0);
        let y = rand_labels(&mut r, n, k);
        let fm = FeatureMap::new(Tensor::new(vec![n, d], f.clone()).unwrap()).unwrap();
        let protos = compute_prototypes(&fm, &LabelMap::new(y.clone()), k).unwrap();
        let got = i2fv_map(&fm, &protos, COSINE_EPS).unwrap();
        let (p, valid) = oracle_prototypes(&f, n, d, &y, k);
        let want = oracle_i2fv(&f, n, d, &p, &valid);
        for (a, b) in got.map.data().iter().zip(&want) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }
}

pub fn proto_loss_matches_masked_mean_square() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let (n, d, k) = (
            r.random_range(2..40),
            r.random_range(1..9),
            r.random_range(2..5),
        );
        let fs = randn(&mut r, n * d, 1.0);
        let ft = randn(&mut r, n * d, 1.0);
        let y = rand_labels(&mut r, n, k);
        let labels = LabelMap::new(y.clone());
        let to_fm =
            |v: &[f64]| FeatureMap::new(Tensor::new(vec![n, d], v.to_vec()).unwrap()).unwrap();

        let (ps, valid) = oracle_prototypes(&fs, n, d, &y, k);
        let (pt, _) = oracle_prototypes(&ft, n, d, &y, k);
        let ms = oracle_i2fv(&fs, n, d, &ps, &valid);
        let mt = oracle_i2fv(&ft, n, d, &pt, &valid);

        let s_map = i2fv_map(
            &to_fm(&fs),
            &compute_prototypes(&to_fm(&fs), &labels, k).unwrap(),
            COSINE_EPS,
        )
        .unwrap();
        let t_map = i2fv_map(
            &to_fm(&ft),
            &compute_prototypes(&to_fm(&ft), &labels, k).unwrap(),
            COSINE_EPS,
        )
        .unwrap();
        let want = oracle_proto_loss(&ms, &mt, n, &valid);
        assert!(close(proto_kd_value(&s_map, &t_map).unwrap(), want));

        let full = i2fv_pipeline_value(
            &to_fm(&fs),
            &to_fm(&ft),
            &labels,
            k,
            COSINE_EPS,
            ProtoMode::IntraInter,
        )
        .unwrap();
        assert!(close(full, want));
        let intra = i2fv_pipeline_value(
            &to_fm(&fs),
            &to_fm(&ft),
            &labels,
            k,
            COSINE_EPS,
            ProtoMode::IntraOnly,
        )
        .unwrap();
        assert!(close(intra, oracle_intra_loss(&ms, &mt, n, k, &y)));
    }
}

pub fn dice_loss_matches_loop() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let (n, k) = (r.random_range(1..50), r.random_range(2..5));
        let z = randn(&mut r, n * k, 3.0);
        let y = rand_labels(&mut r, n, k);
        let got = evaluate(|g| {
            let l = g.constant(Tensor::new(vec![n, k], z.clone()).unwrap());
            losses::dice_loss(g, l, &LabelMap::new(y.clone()), DICE_EPS)
        })
        .unwrap();
        assert!(close(got, oracle_dice(&z, n, k, &y, DICE_EPS)));
    }
}

pub fn kd_loss_matches_loop_in_both_directions() {
    let mut r = rng(5);
    for i in 0..INSTANCES {
        let (n, k) = (r.random_range(1..50), r.random_range(2..5));
        let s = randn(&mut r, n * k, 4.0);
        let t = randn(&mut r, n * k, 8.0);
        let temp = [1.0, 2.0, 10.0][i % 3];
        for dir in [KlDirection::StudentFirst, KlDirection::Classic] {
            let opts = KdOptions {
                temperature: temp,
                direction: dir,
                t_squared: false,
            };
            let got = evaluate(|g| {
                let l = g.constant(Tensor::new(vec![n, k], s.clone()).unwrap());
                losses::kd_loss(g, l, &Tensor::new(vec![n, k], t.clone()).unwrap(), opts)
            })
            .unwrap();
            let want = oracle_kd(&s, &t, n, k, temp, dir);
            assert!(
                (got - want).abs() <= TOL * 1f64.max(want.abs()),
                "{got} vs {want}"
            );
        }
    }
}

pub fn conv2d_matches_loop() {
    let mut r = rng(6);
    for _ in 0..INSTANCES {
        let (c, o) = (r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let ks = [1, 3, 5][r.random_range(0..3)];
        let x = randn(&mut r, c * h * w, 1.0);
        let k = randn(&mut r, o * c * ks * ks, 1.0);
        let got = evaluate_tensor(|g| {
            let xi = g.constant(Tensor::new(vec![c, h, w], x.clone()).unwrap());
            let ki = g.constant(Tensor::new(vec![o, c, ks, ks], k.clone()).unwrap());
            g.conv2d(xi, ki)
        })
        .unwrap();
        let want = oracle_conv(&x, c, h, w, &k, o, ks);
        assert_eq!(got.shape(), [o, h, w]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!(close(*a, *b));
        }
    }
}

pub fn network_forward_matches_loop() {
    let mut r = rng(7);
    for seed in 0..20u64 {
        let config = SegNetConfig {
            in_channels: r.random_range(1..4),
            hidden: r.random_range(2..6),
            classes: r.random_range(2..4),
            conv_layers: r.random_range(1..3),
            seed,
        };
        let params = init_params(&config).unwrap();
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        let img = randn(&mut r, config.in_channels * h * w, 1.0);
        let image = Tensor::new(vec![config.in_channels, h, w], img.clone()).unwrap();

        let mut x = img;
        let mut c = config.in_channels;
        for l in 0..config.conv_layers {
            let k = params.get(&format!("conv{l}.weight")).unwrap().data();
            let b = params.get(&format!("conv{l}.bias")).unwrap().data();
            let mut y = oracle_conv(&x, c, h, w, k, config.hidden, 3);
            for (j, v) in y.iter_mut().enumerate() {
                let pre = *v + b[j / (h * w)];
                *v = if pre > 0.0 { pre } else { 0.01 * pre };
            }
            x = y;
            c = config.hidden;
        }
        let (n, d, kk) = (h * w, config.hidden, config.classes);
        let feats = backbone_forward(&params, &image).unwrap();
        let hw = params.get("head.weight").unwrap().data();
        let hb = params.get("head.bias").unwrap().data();
        let (_, logits) = predict(&params, &image).unwrap();
        for i in 0..n {
            for j in 0..d {
                assert!(close(feats.data()[i * d + j], x[j * n + i]));
            }
            for cls in 0..kk {
                let want: f64 =
                    hb[cls] + (0..d).map(|j| x[j * n + i] * hw[j * kk + cls]).sum::<f64>();
                assert!(close(logits.data()[i * kk + cls], want));
            }
        }
    }
}
