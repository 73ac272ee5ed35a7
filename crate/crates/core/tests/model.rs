use ct_core::data::{generate_scene, SceneConfig};
use ct_core::harness::{evaluate, ContrastiveMode, ExperimentConfig, Trainer};
use ct_core::losses::{cl_loss, dice_loss, joint_loss, soft_cross_entropy, TermKey};
use ct_core::model::{MixerKind, Model, ModelConfig};
use ct_core::patching::StageSpec;
use ct_core::raster::Image;
use ct_core::tensor::{ParamId, Parameters, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64) -> ct_core::data::Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene(&SceneConfig::default(), "s", &mut rng).unwrap()
}

fn grads_by_role(model_params: &Parameters, grads: &[(ParamId, Tensor)]) -> [f32; 3] {
    // [backbone, decoder, projection] squared gradient mass
    let mut mass = [0.0f32; 3];
    for (id, g) in grads {
        let name = model_params.name(*id);
        let slot = if Model::is_projection_param(name) {
            2
        } else if Model::is_decoder_param(name) {
            1
        } else {
            assert!(Model::is_backbone_param(name), "{name}");
            0
        };
        mass[slot] += g.data().iter().map(|v| v * v).sum::<f32>();
    }
    mass
}

#[test]
fn contrastive_loss_alone_reaches_projection_not_decoder() {
    for mixer in [MixerKind::MeanPooling, MixerKind::WindowedAttention] {
        let cfg = ModelConfig {
            mixer,
            ..ModelConfig::default()
        };
        let (model, params) = Model::new(cfg, 3).unwrap();
        let s0 = scene(1);
        let mut sess = params.session();
        let mut feats = model.backbone_forward(&mut sess, &[&s0.image]).unwrap();
        let _logits = model.decode(&mut sess, &feats).unwrap();
        model.project(&mut sess, &mut feats).unwrap();
        let f = feats.projected.as_ref().unwrap()[0];
        let g = &mut sess.graph;
        let flat = g.reshape(f, &[256, 64]).unwrap();
        let u = g.gather(flat, &[0, 5, 17, 200]).unwrap();
        let v = g.gather(flat, &[1, 90, 18, 3]).unwrap();
        let loss = cl_loss(g, u, v, &[true, false, true, false], 0.1)
            .unwrap()
            .unwrap();
        sess.backward(loss).unwrap();
        let grads = sess.param_grads();
        let [backbone, decoder, projection] = grads_by_role(&params, &grads);
        assert!(projection > 0.0, "{mixer:?}");
        assert!(backbone > 0.0, "{mixer:?}");
        assert_eq!(decoder, 0.0, "{mixer:?}");
    }
}

#[test]
fn joint_loss_reaches_every_component() {
    let (model, params) = Model::new(ModelConfig::default(), 1).unwrap();
    let s0 = scene(2);
    let labels = s0.mask.data.clone();
    for with_contrastive in [true, false] {
        let mut sess = params.session();
        let mut feats = model.backbone_forward(&mut sess, &[&s0.image]).unwrap();
        let logits = model.decode(&mut sess, &feats).unwrap();
        let mut terms = Vec::new();
        if with_contrastive {
            model.project(&mut sess, &mut feats).unwrap();
            let f = feats.projected.as_ref().unwrap()[1];
            let g = &mut sess.graph;
            let flat = g.reshape(f, &[64, 64]).unwrap();
            let u = g.gather(flat, &[0, 9]).unwrap();
            let v = g.gather(flat, &[1, 40]).unwrap();
            let t = cl_loss(g, u, v, &[true, false], 0.1).unwrap().unwrap();
            terms.push((TermKey { stage: 2, class: 0 }, t));
        }
        let g = &mut sess.graph;
        let ce = soft_cross_entropy(g, logits, &labels, 0.1).unwrap();
        let probs = g.softmax(logits, 3).unwrap();
        let dice = dice_loss(g, probs, &labels).unwrap();
        // a clip far above any raw value so that the contrastive gradient passes
        let joint = joint_loss(g, ce, dice, &terms, 1e6).unwrap();
        sess.backward(joint.total).unwrap();
        let grads = sess.param_grads();
        let [backbone, decoder, projection] = grads_by_role(&params, &grads);
        assert!(backbone > 0.0 && decoder > 0.0);
        if with_contrastive {
            assert!(projection > 0.0);
        } else {
            assert_eq!(projection, 0.0);
        }
    }
}

#[test]
fn stage_grids_match_stage_specs() {
    for side in [32, 64, 96] {
        let cfg = ModelConfig {
            image_side: side,
            ..ModelConfig::default()
        };
        let (model, params) = Model::new(cfg.clone(), 0).unwrap();
        let img = Image::zeros(side, side);
        let mut sess = params.inference();
        let feats = model.backbone_forward(&mut sess, &[&img]).unwrap();
        let specs = StageSpec::hierarchy(side, side, &[4, 8, 16, 32]).unwrap();
        assert_eq!(specs, cfg.stage_specs().unwrap());
        for (z, spec) in feats.tokens.iter().zip(&specs) {
            let shape = sess.graph.shape(*z);
            assert_eq!((shape[1], shape[2]), (spec.grid_h, spec.grid_w));
        }
    }
}

#[test]
fn memorizes_a_single_image() {
    let s0 = scene(5);
    let mut cfg = ExperimentConfig::default()
        .with_overrides(&["optimizer.lr=0.005", "optimizer.weight_decay=0"])
        .unwrap();
    cfg.contrastive_mode = ContrastiveMode::Off;
    let mut trainer = Trainer::new(&cfg, 1).unwrap();
    for _ in 0..400 {
        trainer.train_step(&[&s0]).unwrap();
    }
    let logits = trainer
        .model
        .predict(&trainer.params, &[&s0.image])
        .unwrap();
    let pred = ct_core::harness::argmax_labels(logits.data(), 6);
    let correct = pred
        .iter()
        .zip(&s0.mask.data)
        .filter(|(p, t)| p == t)
        .count();
    let acc = correct as f64 / pred.len() as f64;
    assert!(acc >= 0.95, "pixel accuracy {acc}");
    let e = evaluate(&trainer.model, &trainer.params, &[s0], 1).unwrap();
    assert!(e.miou > 0.5);
}
