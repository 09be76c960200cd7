use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::Bindings;

fn tiny(variant: Variant) -> EncoderConfig {
    let mut c = EncoderConfig::new(variant, 4, 5, 3).with_dim(8);
    c.mlp_hidden = 12;
    c
}

fn subjects(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn patches(b: usize, seed: u64) -> Tensor {
    Tensor::randn(&[b, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn output_shapes() {
    let m = Model::new(tiny(Variant::ClipMused), subjects(2), 1).unwrap();
    let out = m.forward(&patches(3, 2), &[0, 1, 0], true).unwrap();
    assert_eq!(out.z_llv.unwrap().shape(), &[3, 8]);
    assert_eq!(out.z_hlv.unwrap().shape(), &[3, 8]);
    assert_eq!(out.probs.shape(), &[3, 3]);
    assert_eq!(out.attention.len(), 2);
    assert_eq!(out.attention[0].heads[0].shape(), &[3, 6, 6]);
    assert!(out.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn attention_rows_sum_to_one() {
    let m = Model::new(tiny(Variant::ClipMused), subjects(2), 3).unwrap();
    let out = m.forward(&patches(4, 5), &[0, 1, 1, 0], true).unwrap();
    for rec in &out.attention {
        for h in &rec.heads {
            for row in h.data().chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for t in [TokenKind::Llv, TokenKind::Hlv] {
            let a = extract_attention(rec, t).unwrap();
            assert_eq!(a.shape(), &[4, 4]);
            for i in 0..4 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_head_extract_matches_raw_row() {
    let mut c = tiny(Variant::ClipMused);
    c.heads = 1;
    let m = Model::new(c, subjects(1), 3).unwrap();
    let out = m.forward(&patches(1, 5), &[0], true).unwrap();
    let rec = out.attention.last().unwrap();
    let a = extract_attention(rec, TokenKind::Hlv).unwrap();
    let raw = &rec.heads[0].data()[6..12];
    let total: f64 = raw[2..].iter().sum();
    for (x, y) in a.data().iter().zip(&raw[2..]) {
        assert!((x - y / total).abs() < 1e-15);
    }
}

#[test]
fn missing_token_kinds_are_reported() {
    let m = Model::new(tiny(Variant::MsSmodel), subjects(2), 1).unwrap();
    let out = m.forward(&patches(2, 1), &[0, 1], true).unwrap();
    assert!(matches!(
        extract_attention(&out.attention[1], TokenKind::Llv),
        Err(Error::VariantLacksTokens(_))
    ));
    assert!(token_rsm(&m).is_err());
}

#[test]
fn unknown_subject() {
    let m = Model::new(tiny(Variant::ClipMused), subjects(2), 1).unwrap();
    assert!(matches!(m.forward(&patches(1, 1), &[2], false), Err(Error::UnknownSubject(2))));
}

#[test]
fn ms_smodel_ignores_subject_index() {
    let m = Model::new(tiny(Variant::MsSmodel), subjects(3), 1).unwrap();
    let x = patches(2, 9);
    let a = m.forward(&x, &[0, 1], false).unwrap().probs;
    let b = m.forward(&x, &[2, 2], false).unwrap().probs;
    assert_eq!(a, b);
}

#[test]
fn batch_order_equivariance() {
    let m = Model::new(tiny(Variant::ClipMused), subjects(2), 4).unwrap();
    let x = patches(3, 7);
    let a = m.forward(&x, &[0, 1, 1], false).unwrap().probs;
    let perm = [2, 0, 1];
    let b = m.forward(&x.select_rows(&perm), &[1, 0, 1], false).unwrap().probs;
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(a.row(p), b.row(k));
    }
}

#[test]
fn token_isolation_is_bitwise() {
    let mut m = Model::new(tiny(Variant::ClipMused), subjects(2), 4).unwrap();
    let x = patches(2, 1);
    let before = m.forward(&x, &[0, 0], false).unwrap();
    for name in ["tokens.llv", "tokens.hlv"] {
        let t = m.params.get_mut(name).unwrap();
        t.row_mut(1).iter_mut().for_each(|v| *v += 0.5);
    }
    let after = m.forward(&x, &[0, 0], false).unwrap();
    assert_eq!(before.z_llv, after.z_llv);
    assert_eq!(before.probs, after.probs);
}

#[test]
fn parameter_counts_scale_with_tokens_only() {
    let shared = Model::new(tiny(Variant::ClipMused), subjects(1), 0).unwrap().shared_param_count();
    for n in 1..=5 {
        let m = Model::new(tiny(Variant::ClipMused), subjects(n), 0).unwrap();
        assert_eq!(m.shared_param_count(), shared);
        assert_eq!(m.param_count(), shared + 2 * n * 8);
        let e = Model::new(tiny(Variant::MsEmb), subjects(n), 0).unwrap();
        assert_eq!(e.token_param_count(), n * 8);
        let s = Model::new(tiny(Variant::MsSmodel), subjects(n), 0).unwrap();
        assert_eq!(s.token_param_count(), 0);
    }
}

#[test]
fn residual_variants_differ() {
    let a = Model::new(tiny(Variant::ClipMused), subjects(1), 2).unwrap();
    let mut cfg = tiny(Variant::ClipMused);
    cfg.residual = ResidualVariant::Conventional;
    let b = Model { config: cfg, ..a.clone() };
    let x = patches(2, 3);
    let za = a.forward(&x, &[0, 0], false).unwrap().z_hlv.unwrap();
    let zb = b.forward(&x, &[0, 0], false).unwrap().z_hlv.unwrap();
    assert!(za.max_abs_diff(&zb) > 1e-8);
}

#[test]
fn zero_logits_give_half() {
    let mut m = Model::new(tiny(Variant::ClipMused), subjects(1), 2).unwrap();
    for name in ["head.fc2", "head.b2"] {
        m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let p = m.forward(&patches(2, 3), &[0, 0], false).unwrap().probs;
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn all_zero_model_is_finite() {
    let mut m = Model::new(tiny(Variant::ClipMused), subjects(1), 2).unwrap();
    for t in m.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = m.forward(&patches(2, 3), &[0, 0], false).unwrap();
    assert!(out.z_llv.unwrap().data().iter().all(|&v| v == 0.0));
    assert!(out.probs.data().iter().all(|&v| v == 0.5));
}

#[test]
fn config_errors() {
    let mut c = tiny(Variant::ClipMused);
    c.head_hidden = 0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny(Variant::ClipMused);
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(Variant::ClipMused);
    let mut conv = ConvFrontEnd::large_volume([12, 12, 12]);
    conv.interleave = true;
    c.conv = Some(conv);
    assert!(c.validate().is_err());
}

#[test]
fn conv_geometry_examples() {
    assert_eq!(conv_geometry(&ConvFrontEnd::large_volume([113, 136, 113])).unwrap(), (392, 512));
    let desk = ConvFrontEnd {
        input_dims: [12, 12, 12],
        input_channels: 1,
        layers: vec![
            ConvLayer { kernel: 2, stride: 2, padding: 0, channels: 8 },
            ConvLayer { kernel: 2, stride: 2, padding: 0, channels: 16 },
        ],
        interleave: false,
    };
    assert_eq!(conv_geometry(&desk).unwrap(), (27, 16));
    let tiny = ConvFrontEnd {
        input_dims: [1, 1, 1],
        input_channels: 1,
        layers: vec![ConvLayer { kernel: 3, stride: 1, padding: 0, channels: 2 }],
        interleave: false,
    };
    assert!(conv_geometry(&tiny).is_err());
}

#[test]
fn conv_front_end_runs_end_to_end() {
    let conv = ConvFrontEnd {
        input_dims: [4, 4, 4],
        input_channels: 1,
        layers: vec![ConvLayer { kernel: 2, stride: 2, padding: 0, channels: 3 }],
        interleave: false,
    };
    let mut c = EncoderConfig::new(Variant::ClipMused, 8, 3, 2).with_dim(4);
    c.conv = Some(conv);
    let m = Model::new(c, subjects(1), 0).unwrap();
    let vols = Tensor::randn(&[2, 64, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let p = volume_patchify_cnn(&m, &vols.clone().reshape(&[2, 4, 4, 4]).unwrap()).unwrap();
    assert_eq!(p.shape(), &[2, 8, 3]);
    let out = m.forward(&vols, &[0, 0], false).unwrap();
    assert_eq!(out.probs.shape(), &[2, 2]);
}

#[test]
fn ss_mlp_forward() {
    let m = Model::new(tiny(Variant::SsMlp), subjects(1), 0).unwrap();
    assert_eq!(m.forward(&patches(3, 1), &[0, 0, 0], false).unwrap().probs.shape(), &[3, 3]);
}

#[test]
fn token_rsm_cases() {
    let mut m = Model::new(tiny(Variant::ClipMused), subjects(3), 0).unwrap();
    let same = Tensor::from_rows(&vec![vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]; 3]).unwrap();
    m.params.insert("tokens.llv".into(), same);
    let mut eye = Tensor::zeros(&[3, 8]);
    for i in 0..3 {
        eye.set2(i, i, 2.0);
    }
    m.params.insert("tokens.hlv".into(), eye);
    let (l, h) = token_rsm(&m).unwrap();
    assert!(l.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    assert!(h.max_abs_diff(&Tensor::identity(3)) < 1e-12);
}

#[test]
fn full_graph_grad_check() {
    let m = Model::new(tiny(Variant::ClipMused), subjects(2), 8).unwrap();
    let mg = m.build_graph(&[0, 1, 1]).unwrap();
    let mut g = mg.graph;
    let s = g.mean(mg.probs);
    let zl = g.mean(mg.z_llv.unwrap());
    let t = g.add(s, zl);
    g.set_output("loss", t);
    let (name, x) = m.input_tensor(&patches(3, 4)).unwrap();
    let mut bind: Bindings = m.bindings();
    bind.bind(name, &x);
    let r = g.grad_check(&bind, "loss", 1e-5, 1e-5).unwrap();
    assert!(r.passed(), "{}", r.max_rel_error);
}
