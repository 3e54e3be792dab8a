// Independent re-computations of ops, attention, the model pipeline and the
// data plumbing, compared against the library.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use logonet_core::attention::{
    apply_hybrid, channel_attention, spatial_attention, AttentionMode, ChannelAttention,
    SpatialAttention,
};
use logonet_core::dataset::synth::{render_logo, render_sketch, tier_of};
use logonet_core::dataset::{
    all_train, load_manifest, make_split, synth_generate, ImageStore, Split, SplitMode, Subset,
    SynthConfig,
};
use logonet_core::eval::{evaluate_queries, gallery_from_store, Query};
use logonet_core::model::{LogoNetConfig, LogoNetModel};
use logonet_core::retrieval::embed_images;
use logonet_core::training::{AugmentConfig, AugmentParams, TrainConfig, Trainer, TripletSampler};
use logonet_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn close(a: &[f32], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| (x as f64 - y).abs() <= tol)
}

// ---- pooling and distance ----------------------------------------------------

fn brute_maxpool(x: &Tensor<f32>, k: usize, s: usize) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = x.data()[((b * c + ch) * h + oy * s + dy) * w + ox * s + dx];
                            m = m.max(v as f64);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

#[test]
fn maxpool_matches_per_window_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (shape, k, s) in [
        ([1, 1, 8, 8], 2, 2),
        ([2, 3, 7, 9], 3, 2),
        ([1, 2, 5, 5], 2, 1),
    ] {
        let x = random(&mut rng, &shape);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = tape.maxpool2d(v, k, s).unwrap();
        assert!(
            close(tape.value(out).data(), &brute_maxpool(&x, k, s), 0.0),
            "{shape:?} k={k} s={s}"
        );
    }
}

#[test]
fn global_and_channel_pools_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 4, 5]);
    let (n, c, hw) = (2, 3, 20);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let gavg = tape.global_avgpool(v).unwrap();
    let gmax = tape.global_maxpool(v).unwrap();
    let cmean = tape.channel_mean(v).unwrap();
    let cmax = tape.channel_max(v).unwrap();
    let d = x.data();
    let plane = |b: usize, ch: usize| &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
    let mut want_avg = Vec::new();
    let mut want_max = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            want_avg.push(plane(b, ch).iter().map(|&v| v as f64).sum::<f64>() / hw as f64);
            want_max.push(
                plane(b, ch)
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64)),
            );
        }
    }
    let mut want_cmean = Vec::new();
    let mut want_cmax = Vec::new();
    for b in 0..n {
        for p in 0..hw {
            let vals: Vec<f64> = (0..c).map(|ch| plane(b, ch)[p] as f64).collect();
            want_cmean.push(vals.iter().sum::<f64>() / c as f64);
            want_cmax.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    assert!(close(tape.value(gavg).data(), &want_avg, 1e-6));
    assert!(close(tape.value(gmax).data(), &want_max, 0.0));
    assert!(close(tape.value(cmean).data(), &want_cmean, 1e-6));
    assert!(close(tape.value(cmax).data(), &want_cmax, 0.0));
    assert_eq!(tape.shape(gavg), [2, 3, 1, 1]);
    assert_eq!(tape.shape(cmax), [2, 1, 4, 5]);
}

#[test]
fn euclidean_distance_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[1, 64]);
    let b = random(&mut rng, &[1, 64]);
    let want: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let d = tape.euclidean_distance(av, bv).unwrap();
    assert!(close(tape.value(d).data(), &[want], 1e-5));
}

// ---- attention ---------------------------------------------------------------

struct CaParams {
    w1: Tensor<f32>,
    b1: Tensor<f32>,
    w2: Tensor<f32>,
    b2: Tensor<f32>,
}

fn ca_params(rng: &mut ChaCha8Rng, c: usize, hidden: usize) -> CaParams {
    CaParams {
        w1: random(rng, &[hidden, c]),
        b1: random(rng, &[hidden]),
        w2: random(rng, &[c, hidden]),
        b2: random(rng, &[c]),
    }
}

fn bind_ca(tape: &mut Tape<f32>, p: &CaParams) -> ChannelAttention<Var> {
    ChannelAttention {
        w1: tape.constant(p.w1.clone()),
        b1: tape.constant(p.b1.clone()),
        w2: tape.constant(p.w2.clone()),
        b2: tape.constant(p.b2.clone()),
    }
}

fn scalar_mlp(p: &CaParams, d: &[f64]) -> Vec<f64> {
    let (hidden, c) = (p.b1.data().len(), d.len());
    let h: Vec<f64> = (0..hidden)
        .map(|j| {
            let z = p.b1.data()[j] as f64
                + (0..c)
                    .map(|i| p.w1.data()[j * c + i] as f64 * d[i])
                    .sum::<f64>();
            z.max(0.0)
        })
        .collect();
    (0..c)
        .map(|i| {
            p.b2.data()[i] as f64
                + (0..hidden)
                    .map(|j| p.w2.data()[i * hidden + j] as f64 * h[j])
                    .sum::<f64>()
        })
        .collect()
}

fn scalar_channel_mask(x: &Tensor<f32>, p: &CaParams) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let hw = h * w;
    let mut out = Vec::new();
    for b in 0..n {
        let plane = |ch: usize| &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
        let avg: Vec<f64> = (0..c)
            .map(|ch| plane(ch).iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
            .collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| {
                plane(ch)
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
            })
            .collect();
        let (ma, mm) = (scalar_mlp(p, &avg), scalar_mlp(p, &max));
        out.extend(ma.iter().zip(&mm).map(|(a, m)| sigmoid(a + m)));
    }
    out
}

fn scalar_spatial_mask(x: &Tensor<f32>, weight: &Tensor<f32>, bias: f32) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let k = weight.shape()[2];
    let pad = (k - 1) as isize / 2;
    let mut out = Vec::new();
    for b in 0..n {
        let at = |ch: usize, y: usize, xx: usize| x.data()[((b * c + ch) * h + y) * w + xx] as f64;
        let maps: [Vec<f64>; 2] = [
            (0..h * w)
                .map(|p| (0..c).map(|ch| at(ch, p / w, p % w)).sum::<f64>() / c as f64)
                .collect(),
            (0..h * w)
                .map(|p| {
                    (0..c)
                        .map(|ch| at(ch, p / w, p % w))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect(),
        ];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = bias as f64;
                for (m, map) in maps.iter().enumerate() {
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let (iy, ix) = (y + ky - pad, xx + kx - pad);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[(m * k + ky as usize) * k + kx as usize] as f64;
                            acc += wv * map[iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    out
}

#[test]
fn channel_mask_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x = random(&mut rng, &[2, 8, 5, 6]);
        let p = ca_params(&mut rng, 8, 2);
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let ca = bind_ca(&mut tape, &p);
        let mask = channel_attention(&mut tape, f, &ca).unwrap();
        assert_eq!(tape.shape(mask), [2, 8, 1, 1]);
        assert!(close(
            tape.value(mask).data(),
            &scalar_channel_mask(&x, &p),
            1e-5
        ));
    }
}

#[test]
fn channel_mask_of_constant_planes_doubles_the_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let per_channel: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::new(
        vec![1, 4, 3, 3],
        per_channel.iter().flat_map(|&v| [v; 9]).collect(),
    )
    .unwrap();
    let p = ca_params(&mut rng, 4, 2);
    let mut tape = Tape::new();
    let f = tape.constant(x);
    let ca = bind_ca(&mut tape, &p);
    let mask = channel_attention(&mut tape, f, &ca).unwrap();
    let d: Vec<f64> = per_channel.iter().map(|&v| v as f64).collect();
    let want: Vec<f64> = scalar_mlp(&p, &d)
        .iter()
        .map(|m| sigmoid(2.0 * m))
        .collect();
    assert!(close(tape.value(mask).data(), &want, 1e-6));
}

#[test]
fn spatial_mask_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in [3, 5, 7] {
        let x = random(&mut rng, &[2, 5, 6, 7]);
        let weight = random(&mut rng, &[1, 2, k, k]);
        let bias = rng.random_range(-1.0f32..1.0);
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let sa = SpatialAttention {
            weight: tape.constant(weight.clone()),
            bias: tape.constant(Tensor::new(vec![1], vec![bias]).unwrap()),
        };
        let mask = spatial_attention(&mut tape, f, &sa).unwrap();
        assert_eq!(tape.shape(mask), [2, 1, 6, 7]);
        assert!(
            close(
                tape.value(mask).data(),
                &scalar_spatial_mask(&x, &weight, bias),
                1e-5
            ),
            "k={k}"
        );
    }
}

#[test]
fn single_channel_spatial_maps_are_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 1, 4, 4]);
    let mut tape = Tape::new();
    let f = tape.constant(x.clone());
    let mean = tape.channel_mean(f).unwrap();
    let max = tape.channel_max(f).unwrap();
    assert_eq!(tape.value(mean).data(), x.data());
    assert_eq!(tape.value(max).data(), x.data());
}

#[test]
fn both_mode_is_channel_then_spatial() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 8, 6, 6]);
    let p = ca_params(&mut rng, 8, 4);
    let weight = random(&mut rng, &[1, 2, 3, 3]);
    let mut tape = Tape::new();
    let f = tape.constant(x);
    let ca = bind_ca(&mut tape, &p);
    let sa = SpatialAttention {
        weight: tape.constant(weight),
        bias: tape.constant(Tensor::new(vec![1], vec![0.1]).unwrap()),
    };
    let out = apply_hybrid(&mut tape, f, &ca, &sa, AttentionMode::Both).unwrap();

    let cm = channel_attention(&mut tape, f, &ca).unwrap();
    let refined = tape.mul_broadcast(f, cm).unwrap();
    let sm = spatial_attention(&mut tape, refined, &sa).unwrap();
    let manual = tape.mul_broadcast(refined, sm).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(manual).data());

    let ca_only = apply_hybrid(&mut tape, f, &ca, &sa, AttentionMode::ChannelOnly).unwrap();
    assert_eq!(tape.value(ca_only).data(), tape.value(refined).data());
    let sm_raw = spatial_attention(&mut tape, f, &sa).unwrap();
    let sa_manual = tape.mul_broadcast(f, sm_raw).unwrap();
    let sa_only = apply_hybrid(&mut tape, f, &ca, &sa, AttentionMode::SpatialOnly).unwrap();
    assert_eq!(tape.value(sa_only).data(), tape.value(sa_manual).data());
}

// ---- model -------------------------------------------------------------------

fn small_config() -> LogoNetConfig {
    LogoNetConfig {
        input_size: 16,
        first_kernel: 5,
        embed_dim: 8,
        reduction_ratio: 2,
        ..LogoNetConfig::default()
    }
    .with_stages(vec![4, 8])
}

#[test]
fn attention_free_model_is_the_plain_pipeline() {
    let cfg = small_config().with_attention_toggles(false, false);
    let model = LogoNetModel::<f32>::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 1, 16, 16]);
    let got = model.embed(&x).unwrap();

    let p: BTreeMap<&str, &Tensor<f32>> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.tensor))
        .collect();
    let mut tape = Tape::new();
    let c = |name: &str| (*p[name]).clone();
    let xv = tape.constant(x);
    let w = c("first_conv.weight");
    let b = c("first_conv.bias");
    let (w, b) = (tape.constant(w), tape.constant(b));
    let mut h = tape.conv2d(xv, w, b, 1, 2).unwrap();
    for s in 1..=2 {
        let w = c(&format!("stage{s}.conv.weight"));
        let b = c(&format!("stage{s}.conv.bias"));
        let (w, b) = (tape.constant(w), tape.constant(b));
        h = tape.conv2d(h, w, b, 1, 1).unwrap();
        h = tape.relu(h);
        h = tape.maxpool2d(h, 2, 2).unwrap();
    }
    let pooled = tape.global_avgpool(h).unwrap();
    let pooled = tape.reshape(pooled, &[3, 8]).unwrap();
    let w = c("head.weight");
    let b = c("head.bias");
    let (w, b) = (tape.constant(w), tape.constant(b));
    let e = tape.linear(pooled, w, b).unwrap();
    let e = tape.l2_normalize(e).unwrap();
    assert_eq!(got.data(), tape.value(e).data());
}

#[test]
fn embed_triplet_gradient_is_the_sum_of_branches() {
    let model = LogoNetModel::<f64>::init(small_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let imgs: Vec<Tensor<f64>> = (0..3)
        .map(|_| random(&mut rng, &[2, 1, 16, 16]).cast())
        .collect();
    let proj: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[2, 8]).cast()).collect();

    // gradient of sum_b <proj_b, e_b> restricted to the branches in `mask`
    let grads = |mask: [bool; 3]| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let v: Vec<Var> = imgs.iter().map(|t| tape.constant(t.clone())).collect();
        let (a, p, n) = model
            .embed_triplet(&mut tape, &bound, v[0], v[1], v[2])
            .unwrap();
        let mut terms = Vec::new();
        for (i, e) in [a, p, n].into_iter().enumerate() {
            if mask[i] {
                let r = tape.constant(proj[i].clone());
                let m = tape.mul_broadcast(e, r).unwrap();
                terms.push(tape.sum(m));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        tape.backward(total).unwrap();
        bound.gradients(&tape)
    };
    let all = grads([true; 3]);
    let parts = [
        grads([true, false, false]),
        grads([false, true, false]),
        grads([false, false, true]),
    ];
    for (pi, g) in all.iter().enumerate() {
        for (j, &v) in g.iter().enumerate() {
            let sum = parts[0][pi][j] + parts[1][pi][j] + parts[2][pi][j];
            assert!(
                (v - sum).abs() <= 1e-10 * (1.0 + v.abs()),
                "param {pi}[{j}]: {v} vs {sum}"
            );
        }
    }
    // every parameter is shared: each branch alone moves the first conv
    for part in &parts {
        assert!(part[0].iter().any(|&v| v != 0.0));
    }
}

// ---- data --------------------------------------------------------------------

fn synth(
    dir: &Path,
    instances: usize,
    per: usize,
    size: usize,
    seed: u64,
) -> logonet_core::dataset::DatasetManifest {
    synth_generate(
        &SynthConfig {
            instances,
            sketches_per_instance: per,
            size,
            seed,
        },
        dir,
    )
    .unwrap()
}

#[test]
fn sampler_anchor_frequencies_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = all_train(&synth(dir.path(), 100, 4, 8, 1));
    let sampler = TripletSampler::new(&manifest, Split::Train).unwrap();
    let owner: BTreeMap<&str, &str> = manifest
        .sketches()
        .iter()
        .map(|s| (s.sketch_id.as_str(), s.instance_id.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in sampler.sample_triplets(&mut rng).take(10_000) {
        assert_eq!(owner[t.anchor_sketch_id.as_str()], t.positive_logo_id);
        assert_ne!(t.positive_logo_id, t.negative_logo_id);
        *counts.entry(t.positive_logo_id).or_default() += 1;
    }
    assert_eq!(counts.len(), 100);
    for (id, n) in counts {
        let f = n as f64 / 10_000.0;
        assert!((f - 0.01).abs() <= 0.005, "{id}: {f}");
    }
}

#[test]
fn crop_offsets_are_uniform() {
    let cfg = AugmentConfig {
        crop_fraction: 0.9,
        hflip_prob: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let span = 64 - cfg.crop_side(64);
    let mut xs = vec![0usize; span + 1];
    let mut ys = vec![0usize; span + 1];
    let mut flips = 0;
    for _ in 0..10_000 {
        let p = AugmentParams::draw(64, &cfg, &mut rng);
        assert_eq!(p.side, 58);
        xs[p.crop_x] += 1;
        ys[p.crop_y] += 1;
        flips += usize::from(p.flip);
    }
    // chi-square against uniform, 6 degrees of freedom, p = 0.001
    let expected = 10_000.0 / (span + 1) as f64;
    for counts in [&xs, &ys] {
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 22.46, "chi2 {chi2} over {counts:?}");
    }
    assert!((flips as f64 / 10_000.0 - 0.5).abs() < 0.02);
}

#[test]
fn synthetic_instances_are_farther_apart_than_their_easy_sketches() {
    let (seed, size) = (42, 64);
    let mse = |a: &[f32], b: &[f32]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    };
    assert_eq!(tier_of(0), Subset::Easy);
    let logos: Vec<Vec<f32>> = (0..20).map(|i| render_logo(seed, i, size)).collect();
    let easy: Vec<Vec<f32>> = (0..20).map(|i| render_sketch(seed, i, 0, size)).collect();
    let (mut good, mut total) = (0, 0);
    for i in 0..20 {
        let own = mse(&logos[i], &easy[i]);
        for j in 0..20 {
            if i != j {
                total += 1;
                good += usize::from(mse(&logos[i], &logos[j]) > own);
            }
        }
    }
    assert!(good as f64 >= 0.95 * total as f64, "{good}/{total}");
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), 6, 3, 32, 9);
    synth(b.path(), 6, 3, 32, 9);
    let tree = |root: &Path| {
        let mut files = BTreeMap::new();
        for dir in ["images", "sketches"] {
            for e in std::fs::read_dir(root.join(dir)).unwrap() {
                let p = e.unwrap().path();
                files.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
        files.insert(
            "manifest.csv".into(),
            std::fs::read(root.join("manifest.csv")).unwrap(),
        );
        files
    };
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 6 + 18 + 1);
    assert!(ta == tb);
}

#[test]
fn by_instance_split_holds_out_whole_instances() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_split(
        &synth(dir.path(), 100, 2, 8, 4),
        SplitMode::ByInstance,
        0.1,
        5,
    )
    .unwrap();
    let ids = |split| {
        m.sketches_in(split)
            .map(|s| s.instance_id.clone())
            .collect::<HashSet<_>>()
    };
    let (train, test) = (ids(Split::Train), ids(Split::Test));
    assert_eq!(test.len(), 10);
    assert_eq!(train.len(), 90);
    assert!(train.is_disjoint(&test));
    assert!(m.sketches().iter().all(|s| s.split.is_some()));
}

#[test]
fn manifest_round_trips_and_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_split(&synth(dir.path(), 5, 4, 8, 6), SplitMode::BySketch, 0.25, 1).unwrap();
    m.save().unwrap();
    let back = load_manifest(dir.path()).unwrap();
    assert_eq!(back.logos(), m.logos());
    assert_eq!(back.sketches(), m.sketches());

    let path = dir.path().join("manifest.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("instance_id", "instance", 1)).unwrap();
    assert!(load_manifest(dir.path()).is_err(), "bad header accepted");
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines.push(lines.last().unwrap().replace("logo_0004", "logo_9999"));
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(
        load_manifest(dir.path()).is_err(),
        "dangling or duplicate row accepted"
    );
    std::fs::remove_file(&path).unwrap();
    assert!(load_manifest(dir.path()).is_err());
}

#[test]
fn batched_embedding_equals_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 100, 1, 64, 7);
    let store = ImageStore::load(&m, 1, 64).unwrap();
    let model = LogoNetModel::init(LogoNetConfig::default(), 8).unwrap();
    let images: Vec<&Tensor> = m
        .logos()
        .iter()
        .map(|l| store.logo(&l.instance_id).unwrap())
        .collect();
    let batch = embed_images(&model, &images).unwrap();
    let d = batch.shape()[1];
    for (i, img) in images.iter().enumerate() {
        let single = embed_images(&model, &[*img]).unwrap();
        assert_eq!(single.data(), &batch.data()[i * d..(i + 1) * d], "logo {i}");
    }
}

/// Queries whose embeddings carry no information about their image must
/// score at chance against a real gallery: the harness leaks no ground truth.
#[test]
fn content_free_queries_score_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let m = all_train(&synth(dir.path(), 200, 4, 64, 11));
    let store = ImageStore::load(&m, 1, 64).unwrap();
    let model = LogoNetModel::init(LogoNetConfig::default(), 12).unwrap();
    let gallery = gallery_from_store(&model, &m, &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = gallery.dim();
    let embeddings: Vec<Vec<f32>> = m
        .sketches()
        .iter()
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let queries: Vec<Query> = m
        .sketches()
        .iter()
        .zip(&embeddings)
        .map(|(s, e)| Query {
            embedding: e,
            truth: &s.instance_id,
            subset: s.subset,
        })
        .collect();
    let report = evaluate_queries(&gallery, &queries).unwrap();
    let (p, n) = (1.0 / 200.0, report.overall.queries as f64);
    let sigma = (p * (1.0 - p) / n).sqrt();
    let acc1 = report.overall.acc1.unwrap();
    assert_eq!(report.overall.queries, 800);
    assert!(
        (acc1 - p).abs() <= 3.0 * sigma,
        "acc@1 {acc1} vs chance {p} ± {}",
        3.0 * sigma
    );
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = all_train(&synth(dir.path(), 6, 2, 32, 13));
    let cfg = LogoNetConfig {
        input_size: 32,
        ..small_config()
    };
    let store = ImageStore::load(&m, 1, 32).unwrap();
    let model = LogoNetModel::init(cfg, 14).unwrap();
    let train = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), &m, &store, &train).unwrap();
    for _ in 0..2 {
        trainer.run_epoch().unwrap();
    }
    for (a, b) in model.params().iter().zip(trainer.model().params()) {
        assert!(
            a.tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "{}",
            a.name
        );
    }
}
