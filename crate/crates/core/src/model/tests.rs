use super::*;

fn image(side: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                data.push(f(y, x, c));
            }
        }
    }
    Image::new(side, side, data).unwrap()
}

fn noisy(side: usize) -> Image {
    image(side, |y, x, c| {
        ((y * 31 + x * 17 + c * 7) % 23) as f32 / 23.0
    })
}

#[test]
fn stage_shapes_follow_downsampling() {
    for mixer in [MixerKind::MeanPooling, MixerKind::WindowedAttention] {
        let cfg = ModelConfig {
            mixer,
            ..ModelConfig::default()
        };
        let (model, params) = Model::new(cfg.clone(), 0).unwrap();
        let img = noisy(64);
        let mut s = params.session();
        let feats = model.backbone_forward(&mut s, &[&img, &img]).unwrap();
        let shapes: Vec<_> = feats
            .tokens
            .iter()
            .map(|&z| s.graph.shape(z).to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 16, 16, 16],
                vec![2, 8, 8, 32],
                vec![2, 4, 4, 64],
                vec![2, 2, 2, 128]
            ]
        );
        for (shape, spec) in shapes.iter().zip(cfg.stage_specs().unwrap()) {
            assert_eq!((shape[1], shape[2]), (spec.grid_h, spec.grid_w));
        }
        let logits = model.decode(&mut s, &feats).unwrap();
        assert_eq!(s.graph.shape(logits), &[2, 64, 64, 6]);
    }
}

#[test]
fn decode_logit_shape_k5() {
    let cfg = ModelConfig {
        num_classes: 5,
        ..ModelConfig::default()
    };
    let (model, params) = Model::new(cfg, 1).unwrap();
    let logits = model.predict(&params, &[&noisy(64)]).unwrap();
    assert_eq!(logits.shape(), &[1, 64, 64, 5]);
}

#[test]
fn pooling_mixer_keeps_constant_image_symmetric() {
    let (model, params) = Model::new(ModelConfig::default(), 3).unwrap();
    let img = image(64, |_, _, c| 0.2 + 0.3 * c as f32);
    let mut s = params.inference();
    let feats = model.backbone_forward(&mut s, &[&img]).unwrap();
    for &z in &feats.tokens {
        let t = s.graph.value(z);
        let d = *t.shape().last().unwrap();
        let first = &t.data()[..d];
        for tok in t.data().chunks_exact(d) {
            for (a, b) in tok.iter().zip(first) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn projection_shape_and_zero_weights() {
    let cfg = ModelConfig {
        projection_dim: 8,
        ..ModelConfig::default()
    };
    let (model, mut params) = Model::new(cfg, 0).unwrap();
    let img = noisy(64);
    {
        let mut s = params.session();
        let mut feats = model.backbone_forward(&mut s, &[&img]).unwrap();
        model.project(&mut s, &mut feats).unwrap();
        let f = feats.projected.unwrap();
        assert_eq!(s.graph.shape(f[0]), &[1, 16, 16, 8]);
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if Model::is_projection_param(params.name(id)) {
            params.value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut s = params.session();
    let mut feats = model.backbone_forward(&mut s, &[&img]).unwrap();
    model.project(&mut s, &mut feats).unwrap();
    for f in feats.projected.unwrap() {
        assert!(s.graph.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn project_fails_in_inference_mode() {
    let (model, params) = Model::new(ModelConfig::default(), 0).unwrap();
    let img = noisy(64);
    let mut s = params.inference();
    let mut feats = model.backbone_forward(&mut s, &[&img]).unwrap();
    let err = model.project(&mut s, &mut feats).unwrap_err().to_string();
    assert!(err.contains("inference"), "{err}");
}

#[test]
fn zero_parameters_give_uniform_softmax() {
    let (model, mut params) = Model::new(ModelConfig::default(), 0).unwrap();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.value_mut(id).data_mut().fill(0.0);
    }
    let logits = model.predict(&params, &[&noisy(64)]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn inference_never_binds_projection_leaves() {
    let (model, params) = Model::new(ModelConfig::default(), 0).unwrap();
    let mut s = params.inference();
    let feats = model.backbone_forward(&mut s, &[&noisy(64)]).unwrap();
    model.decode(&mut s, &feats).unwrap();
    for id in params.ids() {
        let proj = Model::is_projection_param(params.name(id));
        assert_eq!(s.touched(id), !proj, "{}", params.name(id));
    }
}

#[test]
fn same_seed_shares_segmentation_weights_across_projection_widths() {
    let (_, a) = Model::new(ModelConfig::default(), 5).unwrap();
    let cfg = ModelConfig {
        projection_dim: 16,
        ..ModelConfig::default()
    };
    let (_, b) = Model::new(cfg, 5).unwrap();
    for id in a.ids() {
        let name = a.name(id);
        if !Model::is_projection_param(name) {
            assert_eq!(a.value(id), b.value(b.id(name).unwrap()), "{name}");
        }
    }
}

#[test]
fn parameter_counts_are_stable() {
    let (_, pool) = Model::new(ModelConfig::default(), 0).unwrap();
    let attn_cfg = ModelConfig {
        mixer: MixerKind::WindowedAttention,
        ..ModelConfig::default()
    };
    let (_, attn) = Model::new(attn_cfg, 0).unwrap();
    assert_eq!(pool.numel(), POOL_PARAMS);
    assert_eq!(attn.numel(), ATTN_PARAMS);
}

// Hand count for the default configuration:
// backbone 133_216 + decoder 8_134 + projection heads 32_256;
// attention adds 4·(d²+d) per stage = 88_000.
const POOL_PARAMS: usize = 173_606;
const ATTN_PARAMS: usize = 261_606;

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default();
    cfg.image_side = 48;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::default();
    cfg.stage_dims = [16, 16, 32, 64];
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig {
        mixer: MixerKind::WindowedAttention,
        head_dim: 24,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().unwrap_err().to_string().contains("head_dim"));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let (_, a) = Model::new(ModelConfig::default(), 11).unwrap();
    save_checkpoint(&a, &path).unwrap();
    let (_, mut b) = Model::new(ModelConfig::default(), 12).unwrap();
    load_checkpoint(&mut b, &path).unwrap();
    for id in a.ids() {
        assert_eq!(a.value(id), b.value(id));
    }
    let bytes = std::fs::read(&path).unwrap();
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["version"], CHECKPOINT_VERSION);

    std::fs::write(&path, b"garbage").unwrap();
    let err = load_checkpoint(&mut b, &path).unwrap_err().to_string();
    assert!(err.contains("model.ckpt"), "{err}");
}
