use rand::Rng as _;

use super::*;
use crate::density::{render_density_map, DotAnnotations};
use crate::image::Image;
use crate::tensor::{Adam, AdamConfig};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn small() -> ModelConfig {
    ModelConfig {
        encoder_blocks: vec![(1, 4), (1, 8), (1, 8)],
        decoder_channels: vec![8, 4, 4],
        attention_reduction: 2,
        ..ModelConfig::default()
    }
}

fn set(model: &mut CounterModel<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let p = model.param_mut(name).unwrap_or_else(|| panic!("{name}"));
    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = CounterModel::<f32>::build(ModelConfig::default()).unwrap();
    let b = CounterModel::<f32>::build(ModelConfig::default()).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    let c = CounterModel::<f32>::build(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
    assert_ne!(a.named_tensors(), c.named_tensors());
}

#[test]
fn invalid_configs_are_rejected() {
    let two_blocks = ModelConfig { encoder_blocks: vec![(1, 4), (1, 4)], ..small() };
    assert!(CounterModel::<f32>::build(two_blocks).is_err());
    let five_rates = ModelConfig { dilation_rates: vec![1, 2, 4, 2, 1], ..small() };
    assert!(CounterModel::<f32>::build(five_rates).is_err());
    let zero_rate = ModelConfig { dilation_rates: vec![1, 0, 1, 1, 1, 1], ..small() };
    assert!(CounterModel::<f32>::build(zero_rate).is_err());
    let two_channels = ModelConfig { input_channels: 2, ..small() };
    assert!(CounterModel::<f32>::build(two_channels).is_err());
}

#[test]
fn default_encoder_output_is_64x8x8() {
    let m = CounterModel::<f32>::build(ModelConfig::default()).unwrap();
    let mut g = Graph::new();
    let p = m.bind_frozen(&mut g);
    let x = g.constant(Tensor::full(vec![1, 1, 64, 64], 0.5));
    let y = m.encode(&mut g, &p, x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 64, 8, 8]);
}

#[test]
fn parameter_count_matches_closed_form() {
    for config in [ModelConfig::default(), ModelConfig::tiny(), small(), ModelConfig { disentangle: false, ..small() }] {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let dense = |fin: usize, fout: usize| fin * fout + fout;
        let mut expected = 0;
        let mut cin = config.input_channels;
        for &(n, c) in &config.encoder_blocks {
            for _ in 0..n {
                expected += conv(cin, c, 3);
                cin = c;
            }
        }
        let feat = cin;
        let hidden = (feat / config.attention_reduction).max(1);
        expected += conv(feat, hidden, 3) + conv(hidden, 1, 1);
        expected += dense(feat, hidden) + dense(hidden, feat);
        expected += 6 * conv(feat, feat, 3);
        let decoder = |out: usize| {
            let mut c = feat;
            let mut n = 0;
            for &w in &config.decoder_channels {
                n += conv(c, w, 3);
                c = w;
            }
            n + conv(c, out, 1)
        };
        expected += decoder(1);
        if config.disentangle {
            expected += decoder(config.style_channels);
        }
        let m = CounterModel::<f32>::build(config).unwrap();
        assert_eq!(m.num_parameters(), expected);
    }
}

#[test]
fn parameters_partition_into_four_groups() {
    let m = CounterModel::<f32>::build(ModelConfig::default()).unwrap();
    let mut names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
    assert!(names.iter().all(|n| ParamGroup::of(n).is_some()));
    let total: usize = ParamGroup::ALL.iter().map(|&g| m.group_names(g).len()).sum();
    assert_eq!(total, names.len());
    assert!(ParamGroup::ALL.iter().all(|&g| !m.group_names(g).is_empty()));
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), m.params().len());
}

#[test]
fn reinitializing_a_group_touches_only_that_group() {
    let base = CounterModel::<f32>::build(small()).unwrap();
    let mut m = base.clone();
    m.reinitialize_group(ParamGroup::DecoderSpecific, 99);
    for (a, b) in base.params().iter().zip(m.params()) {
        let is_target = ParamGroup::of(&a.name) == Some(ParamGroup::DecoderSpecific);
        if !is_target {
            assert_eq!(a.value, b.value, "{}", a.name);
        } else if a.name.ends_with(".weight") {
            assert_ne!(a.value, b.value, "{}", a.name);
        }
    }
    // Same seed as the original build restores it exactly.
    m.reinitialize_group(ParamGroup::DecoderSpecific, base.config().seed);
    assert_eq!(m.named_tensors(), base.named_tensors());
}

#[test]
fn spatial_attention_examples() {
    let mut m = CounterModel::<f64>::build(small()).unwrap();
    let f = random(&[2, 8, 4, 4], 1);
    let run = |m: &CounterModel<f64>| {
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let x = g.constant(f.clone());
        let y = m.spatial_attention(&mut g, &p, x).unwrap();
        g.value(y).clone()
    };
    let y = run(&m);
    assert!(y.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs()));

    set(&mut m, "enhance.spatial.c1.weight", |_| 0.0);
    set(&mut m, "enhance.spatial.c1.bias", |_| 0.0);
    let half = run(&m);
    assert!(half.data().iter().zip(f.data()).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));

    set(&mut m, "enhance.spatial.c1.bias", |_| 60.0);
    let open = run(&m);
    assert!(open.data().iter().zip(f.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn channel_attention_examples() {
    let mut m = CounterModel::<f64>::build(small()).unwrap();
    let f = random(&[2, 8, 4, 4], 2);
    let run = |m: &CounterModel<f64>, f: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let x = g.constant(f.clone());
        let y = m.channel_attention(&mut g, &p, x).unwrap();
        g.value(y).clone()
    };
    let y = run(&m, &f);
    assert!(y.data().iter().zip(f.data()).all(|(a, b)| a.abs() <= b.abs()));

    let mut zeroed = m.clone();
    for name in ["d0.weight", "d0.bias", "d1.weight", "d1.bias"] {
        set(&mut zeroed, &format!("enhance.channel.{name}"), |_| 0.0);
    }
    let half = run(&zeroed, &f);
    assert!(half.data().iter().zip(f.data()).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));

    // Permute channels of f and of the attention parameters consistently.
    let (c, hidden, hw) = (8, 4, 16);
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let permute_planes = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for b in 0..2 {
            for (i, &src) in perm.iter().enumerate() {
                let (d, s) = ((b * c + i) * hw, (b * c + src) * hw);
                out.data_mut()[d..d + hw].copy_from_slice(&t.data()[s..s + hw]);
            }
        }
        out
    };
    let d0 = m.param("enhance.channel.d0.weight").unwrap().value.clone();
    let d1 = m.param("enhance.channel.d1.weight").unwrap().value.clone();
    let b1 = m.param("enhance.channel.d1.bias").unwrap().value.clone();
    set(&mut m, "enhance.channel.d0.weight", |i| d0.data()[(i / c) * c + perm[i % c]]);
    set(&mut m, "enhance.channel.d1.weight", |i| d1.data()[perm[i / hidden] * hidden + i % hidden]);
    set(&mut m, "enhance.channel.d1.bias", |i| b1.data()[perm[i]]);
    let got = run(&m, &permute_planes(&f));
    let want = permute_planes(&y);
    assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn enhance_preserves_size_and_zero() {
    let mut m = CounterModel::<f64>::build(small()).unwrap();
    for name in m.group_names(ParamGroup::Enhancement).iter().map(|s| s.to_string()).collect::<Vec<_>>() {
        if name.ends_with(".bias") {
            set(&mut m, &name, |_| 0.0);
        }
    }
    for (h, w) in [(16, 16), (17, 23)] {
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let x = g.constant(random(&[1, 8, h, w], 3));
        let y = m.enhance(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 8, h, w]);
        let z = g.constant(Tensor::zeros(vec![1, 8, h, w]));
        let y = m.enhance(&mut g, &p, z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dilated_stack_receptive_field() {
    let mut m = CounterModel::<f64>::build(small()).unwrap();
    for i in 0..6 {
        set(&mut m, &format!("enhance.dilated.c{i}.weight"), |_| 0.01);
        set(&mut m, &format!("enhance.dilated.c{i}.bias"), |_| 0.0);
    }
    let n = 64;
    let mut impulse = Tensor::zeros(vec![1, 8, n, n]);
    impulse.data_mut()[32 * n + 32] = 1.0;
    let mut g = Graph::new();
    let p = m.bind_frozen(&mut g);
    let x = g.constant(impulse);
    let y = m.dilated_stack(&mut g, &p, x).unwrap();
    let plane = &g.value(y).data()[..n * n];
    let rows: Vec<usize> = (0..n).filter(|&r| plane[r * n..(r + 1) * n].iter().any(|&v| v > 0.0)).collect();
    let cols: Vec<usize> = (0..n).filter(|&c| (0..n).any(|r| plane[r * n + c] > 0.0)).collect();
    let expected = 1 + 2 * m.config().dilation_rates.iter().sum::<usize>();
    assert_eq!(expected, 43);
    assert_eq!(rows.len(), expected);
    assert_eq!(cols.len(), expected);
    assert_eq!(rows.last().unwrap() - rows[0] + 1, expected);
}

#[test]
fn forward_shapes_and_ranges() {
    let m = CounterModel::<f32>::build(small()).unwrap();
    let mut g = Graph::new();
    let p = m.bind_frozen(&mut g);
    let x = g.constant(random(&[2, 1, 16, 24], 4).cast());
    let out = m.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(out.density).shape(), &[2, 1, 16, 24]);
    let style = out.style.unwrap();
    assert_eq!(g.value(style).shape(), &[2, 1, 16, 24]);
    assert!(g.value(out.density).data().iter().all(|&v| v >= 0.0));
    assert!(g.value(style).data().iter().all(|&v| v > 0.0 && v < 1.0));

    let again = m.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(again.density), g.value(out.density));

    let odd = g.constant(Tensor::zeros(vec![1, 1, 12, 16]));
    assert!(m.forward(&mut g, &p, odd).is_err());
    let rgb = g.constant(Tensor::zeros(vec![1, 3, 16, 16]));
    assert!(matches!(m.forward(&mut g, &p, rgb), Err(Error::Dimension { axis: "channels", .. })));

    let plain = CounterModel::<f32>::build(ModelConfig { disentangle: false, ..small() }).unwrap();
    let p = plain.bind_frozen(&mut g);
    assert!(plain.forward(&mut g, &p, x).unwrap().style.is_none());
}

#[test]
fn perceptual_loss_examples() {
    let m = CounterModel::<f64>::build(small()).unwrap();
    let ex = PerceptualExtractor::snapshot(&m);
    let mut g = Graph::new();
    let a = random(&[2, 1, 8, 8], 5);
    let b = random(&[2, 1, 8, 8], 6);
    let av = g.param(a.clone());
    let bv = g.constant(b.clone());
    let zero = perceptual_loss(&mut g, av, av, &ex).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let l = perceptual_loss(&mut g, av, bv, &ex).unwrap();
    assert!(g.value(l).item() >= 0.0);

    // Hand composition: the encoder's first two blocks, then mse.
    let mut h = Graph::new();
    let p = m.bind_frozen(&mut h);
    let feats = |h: &mut Graph<f64>, x: Var| {
        let mut x = x;
        for (bi, block) in m.layout().encoder[..2].iter().enumerate() {
            if bi > 0 {
                x = h.max_pool2d(x).unwrap();
            }
            for l in block {
                x = h.conv2d(x, p[l.weight], p[l.bias], l.opts).unwrap();
                x = h.relu(x);
            }
        }
        x
    };
    let (ha, hb) = (h.constant(a), h.constant(b));
    let (fa, fb) = (feats(&mut h, ha), feats(&mut h, hb));
    let oracle = h.mse_loss(fa, fb).unwrap();
    assert!((g.value(l).item() - h.value(oracle).item()).abs() < 1e-12);

    let bad = g.constant(Tensor::zeros(vec![2, 1, 8, 16]));
    assert!(perceptual_loss(&mut g, av, bad, &ex).is_err());
}

#[test]
fn extractor_round_trips_through_named_tensors() {
    let m = CounterModel::<f32>::build(small()).unwrap();
    let ex = PerceptualExtractor::snapshot(&m);
    let named = ex.named_tensors();
    assert!(named.iter().all(|(n, _)| n.starts_with("extractor.")));
    assert_eq!(PerceptualExtractor::from_named(&named).unwrap(), Some(ex));
    assert_eq!(PerceptualExtractor::<f32>::from_named(&m.named_tensors()).unwrap(), None);

    let mut all = m.named_tensors();
    all.extend(named);
    let back = CounterModel::from_named(small(), &all).unwrap();
    assert_eq!(back.named_tensors(), m.named_tensors());
    all.pop();
    all.remove(0);
    assert!(CounterModel::from_named(small(), &all).is_err());
}

#[test]
fn total_loss_examples() {
    let m = CounterModel::<f64>::build(small()).unwrap();
    let ex = PerceptualExtractor::snapshot(&m);
    let mut g = Graph::new();
    let y = random(&[2, 1, 8, 8], 7);
    let yv = g.constant(y.clone());
    let s = g.constant(random(&[2, 1, 8, 8], 8));
    let (_, perfect) = total_loss(&mut g, yv, yv, Some((s, s, &ex))).unwrap();
    assert_eq!(perfect.total, 0.0);

    let pred = random(&[2, 1, 8, 8], 9);
    let pv = g.constant(pred.clone());
    let s_hat = g.constant(random(&[2, 1, 8, 8], 10));
    let (_, r) = total_loss(&mut g, pv, yv, Some((s_hat, s, &ex))).unwrap();
    assert!(r.perceptual > 0.0);
    assert!((r.total - (r.mse + r.perceptual)).abs() < 1e-6);
    assert_eq!(r.batch_size, 2);

    let doubled = Tensor::from_fn(vec![2, 1, 8, 8], |i| y.data()[i] + 2.0 * (pred.data()[i] - y.data()[i]));
    let dv = g.constant(doubled);
    let (_, r2) = total_loss(&mut g, dv, yv, Some((s_hat, s, &ex))).unwrap();
    assert!((r2.mse - 4.0 * r.mse).abs() < 1e-9);
    assert_eq!(r2.perceptual, r.perceptual);

    let (_, bare) = total_loss(&mut g, pv, yv, None).unwrap();
    assert_eq!(bare.perceptual, 0.0);
    assert_eq!(bare.total, bare.mse);
}

fn group_grad_norms(m: &CounterModel<f64>, g: &Graph<f64>, p: &[Var]) -> [f64; 4] {
    let mut norms = [0.0; 4];
    for (param, &v) in m.params().iter().zip(p) {
        let gi = ParamGroup::ALL.iter().position(|&x| Some(x) == ParamGroup::of(&param.name)).unwrap();
        norms[gi] += g.grad(v).map_or(0.0, |d| d.iter().map(|x| x.abs()).sum());
    }
    norms
}

#[test]
fn each_loss_reaches_only_its_own_decoder() {
    let m = CounterModel::<f64>::build(small()).unwrap();
    let ex = PerceptualExtractor::snapshot(&m);
    for term in ["mse", "perceptual"] {
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let x = g.constant(random(&[2, 1, 16, 16], 11).cast());
        let out = m.forward(&mut g, &p, x).unwrap();
        let y = g.constant(Tensor::from_fn(vec![2, 1, 16, 16], |i| (i % 7) as f64));
        let s = g.constant(Tensor::from_fn(vec![2, 1, 16, 16], |i| (i % 5) as f64 / 5.0));
        let (vars, _) = total_loss(&mut g, out.density, y, Some((out.style.unwrap(), s, &ex))).unwrap();
        let loss = if term == "mse" { vars.mse } else { vars.perceptual.unwrap() };
        g.backward(loss).unwrap();
        let [enc, enh, specific, agnostic] = group_grad_norms(&m, &g, &p);
        assert!(enc > 0.0 && enh > 0.0, "{term}");
        if term == "mse" {
            assert_eq!(specific, 0.0);
            assert!(agnostic > 0.0);
        } else {
            assert_eq!(agnostic, 0.0);
            assert!(specific > 0.0);
        }
    }
}

#[test]
fn full_model_gradient_check() {
    let report = full_model_grad_check(&ModelConfig::tiny(), 14, 6).unwrap();
    assert!(report.checked > 100);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// Ten 16x16 images of Gaussian spots with matching density maps.
fn toy_set() -> Vec<TrainSample> {
    let mut r = rng::rng(13);
    (0..10)
        .map(|i| {
            let n = 1 + i % 6;
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|_| (r.random_range(2.0..14.0), r.random_range(2.0..14.0)))
                .collect();
            let mut img = Image::filled(16, 16, 1, 0.1);
            for y in 0..16 {
                for x in 0..16 {
                    let v: f64 = pts
                        .iter()
                        .map(|&(px, py)| (-((x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2)) / 2.0).exp())
                        .sum();
                    img.set(x, y, 0, (0.1 + 0.8 * v.min(1.0)) as f32);
                }
            }
            let ann = DotAnnotations::new(pts, 16, 16).unwrap();
            TrainSample {
                image: img,
                density: render_density_map(&ann, 1.0).unwrap(),
                style: None,
            }
        })
        .collect()
}

#[test]
fn train_epoch_is_deterministic() {
    let data = toy_set();
    let run = || {
        let mut m = CounterModel::<f32>::build(ModelConfig { disentangle: false, ..small() }).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let metrics = train_epoch(&mut m, None, &data, &mut adam, 3, 42).unwrap();
        (metrics, m.named_tensors())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.total.to_bits(), b.0.total.to_bits());
    assert_eq!(a.0.mae.to_bits(), b.0.mae.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = toy_set();
    let mut m = CounterModel::<f32>::build(ModelConfig { disentangle: false, ..small() }).unwrap();
    let before = m.named_tensors();
    let mut adam = Adam::new(AdamConfig::with_lr(0.0));
    train_epoch(&mut m, None, &data, &mut adam, 4, 1).unwrap();
    assert_eq!(m.named_tensors(), before);
}

#[test]
fn train_epoch_errors() {
    let mut m = CounterModel::<f32>::build(small()).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    assert!(matches!(train_epoch(&mut m, None, &[], &mut adam, 4, 0), Err(Error::Empty(_))));
    // Disentangled training without an extractor or style targets.
    let data = toy_set();
    assert!(train_epoch(&mut m, None, &data, &mut adam, 4, 0).is_err());
    let ex = PerceptualExtractor::snapshot(&m);
    assert!(train_epoch(&mut m, Some(&ex), &data, &mut adam, 4, 0).is_err());
}

#[test]
fn overfits_a_toy_set() {
    let data = toy_set();
    let mut m = CounterModel::<f32>::build(ModelConfig { disentangle: false, ..small() }).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let first = train_epoch(&mut m, None, &data, &mut adam, 5, 0).unwrap().mae;
    for epoch in 1..200 {
        train_epoch(&mut m, None, &data, &mut adam, 5, epoch).unwrap();
    }
    let images: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let pred = predict_counts(&m, &images, 5).unwrap();
    let truth: Vec<f64> = data.iter().map(TrainSample::count).collect();
    let last = crate::density::mae(&pred, &truth).unwrap();
    assert!(last <= 0.5 * first, "first {first}, last {last}");
}

fn grid_sample(w: usize, h: usize, seed: u64) -> TrainSample {
    let mut r = rng::rng(seed);
    let image = Image::new(w, h, 1, (0..w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let style = Image::new(w, h, 1, (0..w * h).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let points = (0..5)
        .map(|_| (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64)))
        .collect();
    let ann = DotAnnotations::new(points, w, h).unwrap();
    TrainSample {
        image,
        density: render_density_map(&ann, 1.0).unwrap(),
        style: Some(style),
    }
}

#[test]
fn dihedral_matches_flip_and_rotate_oracles() {
    use crate::synthesis::{flip_horizontal, rotate_quarter};
    let s = grid_sample(6, 6, 3);
    assert_eq!(s.dihedral(0), s);
    assert_eq!(s.dihedral(1).image, rotate_quarter(&s.image));
    assert_eq!(s.dihedral(4).image, flip_horizontal(&s.image));
    assert_eq!(s.dihedral(6).style.unwrap(), rotate_quarter(&rotate_quarter(&flip_horizontal(s.style.as_ref().unwrap()))));
    let mut t = s.clone();
    for _ in 0..4 {
        t = t.dihedral(1);
    }
    assert_eq!(t, s);
    assert_eq!(s.dihedral(4).dihedral(4), s);
}

#[test]
fn dihedral_keeps_counts_and_non_square_extents() {
    let s = grid_sample(7, 4, 9);
    assert_eq!(s.symmetries(), &[0, 2, 4, 6]);
    for &k in s.symmetries() {
        let t = s.dihedral(k);
        assert_eq!((t.image.width, t.density.width, t.density.height), (7, 7, 4));
        let mut a = s.density.values.clone();
        let mut b = t.density.values.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
    let turned = s.dihedral(1);
    assert_eq!((turned.image.width, turned.image.height), (4, 7));
    let square = grid_sample(5, 5, 1);
    let data = vec![square.clone(); 20];
    let aug = augment_samples(&data, 7);
    assert_eq!(aug, augment_samples(&data, 7));
    assert!(aug.iter().any(|t| *t != square));
}
