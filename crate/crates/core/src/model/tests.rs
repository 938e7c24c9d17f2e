use super::*;
use crate::gradcheck::grad_check;
use crate::transformer::{ca_encoder_forward, sa_encoder_forward, Trace};

fn small(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        d_w: 16,
        heads: 2,
        d_v: 8,
        d_a: 6,
        d_m: 4,
        ..ModelConfig::paper(variant)
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn random_input(c: &ModelConfig, t: usize, seed: u64) -> DyadInput {
    let mut rng = RngStream::new(seed);
    let video = [random_matrix(t, c.d_v, &mut rng), random_matrix(t, c.d_v, &mut rng)];
    let audio = [random_matrix(t, c.d_a, &mut rng), random_matrix(t, c.d_a, &mut rng)];
    let meta = [random_matrix(1, c.d_m, &mut rng), random_matrix(1, c.d_m, &mut rng)];
    DyadInput::new(video, Some(audio), meta).unwrap()
}

fn eval_forward(model: &Dyadformer, store: &ParamStore, input: &DyadInput) -> [Tensor; 2] {
    model.forward(store, input, &mut ForwardCtx::eval()).unwrap()
}

fn traced_forward(model: &Dyadformer, store: &ParamStore, input: &DyadInput) -> ([Tensor; 2], Trace) {
    let mut ctx = ForwardCtx::eval().with_trace();
    let out = model.forward(store, input, &mut ctx).unwrap();
    (out, ctx.take_trace().unwrap())
}

fn within(actual: usize, reference: f64, tol: f64) -> bool {
    ((actual as f64 - reference) / reference).abs() <= tol
}

#[test]
fn count_matches_initialized_store() {
    for variant in ModelVariant::ALL {
        for share in [true, false] {
            let mut c = small(variant);
            c.share_layers = share;
            c.l_sbj = 2;
            c.l_bm = 2;
            let store = Dyadformer::new(c.clone()).unwrap().init_params(1).unwrap();
            assert_eq!(count_parameters(&c), store.num_scalars(), "{variant} share={share}");
        }
    }
}

#[test]
fn paper_scale_counts() {
    let sa_layer = SaLayerWeights::num_scalars(768, 12);
    assert!(within(sa_layer, 7.1e6, 0.01), "{sa_layer}");
    assert!(within(8 * sa_layer, 56.8e6, 0.01), "{}", 8 * sa_layer);
    let refs = [
        (ModelVariant::TfV, 10.0e6),
        (ModelVariant::DfXm, 19.4e6),
        (ModelVariant::DfXs, 19.4e6),
        (ModelVariant::DfXmXs, 36.0e6),
        (ModelVariant::BertBaseline, 17.1e6),
    ];
    for (variant, reference) in refs {
        let n = count_parameters(&ModelConfig::paper(variant));
        assert!(within(n, reference, 0.01), "{variant}: {n}");
    }
}

#[test]
fn shared_count_is_independent_of_depth() {
    let mut c = ModelConfig::paper(ModelVariant::TfV);
    let base = count_parameters(&c);
    for l in [1, 3, 8] {
        c.l_sbj = l;
        assert_eq!(count_parameters(&c), base);
    }
}

#[test]
fn every_variant_produces_finite_predictions() {
    for variant in ModelVariant::ALL {
        let c = small(variant);
        let model = Dyadformer::new(c.clone()).unwrap();
        let store = model.init_params(7).unwrap();
        let preds = model.predict(&store, &random_input(&c, 3, 11)).unwrap();
        for p in preds {
            assert!(p.values().iter().all(|v| v.is_finite()), "{variant}");
        }
    }
}

#[test]
fn subject_swap_is_equivariant() {
    for variant in [ModelVariant::DfXs, ModelVariant::DfXmXs, ModelVariant::BertBaseline, ModelVariant::DfXm, ModelVariant::TfV] {
        let c = small(variant);
        let model = Dyadformer::new(c.clone()).unwrap();
        let store = model.init_params(2).unwrap();
        let input = random_input(&c, 4, 5);
        let [a, b] = eval_forward(&model, &store, &input);
        let [sa, sb] = eval_forward(&model, &store, &input.swapped());
        assert!(a.bitwise_eq(&sb) && b.bitwise_eq(&sa), "{variant}");
    }
}

#[test]
fn identical_subjects_get_identical_predictions() {
    let c = small(ModelVariant::DfXmXs);
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(3).unwrap();
    let mut input = random_input(&c, 3, 9);
    input.video[1] = input.video[0].clone();
    input.audio.as_mut().unwrap()[1] = input.audio.as_ref().unwrap()[0].clone();
    input.metadata[1] = input.metadata[0].clone();
    let [a, b] = eval_forward(&model, &store, &input);
    assert!(a.bitwise_eq(&b));
}

#[test]
fn metadata_is_ignored_when_disabled() {
    for variant in ModelVariant::ALL {
        let mut c = small(variant);
        c.use_metadata = false;
        let model = Dyadformer::new(c.clone()).unwrap();
        let store = model.init_params(4).unwrap();
        let input = random_input(&c, 3, 1);
        let mut perturbed = input.clone();
        let mut rng = RngStream::new(99);
        perturbed.metadata = [random_matrix(1, c.d_m, &mut rng), random_matrix(1, c.d_m, &mut rng)];
        let x = eval_forward(&model, &store, &input);
        let y = eval_forward(&model, &store, &perturbed);
        assert!(x[0].bitwise_eq(&y[0]) && x[1].bitwise_eq(&y[1]), "{variant}");

        c.use_metadata = true;
        let model = Dyadformer::new(c).unwrap();
        let store = model.init_params(4).unwrap();
        let x = eval_forward(&model, &store, &input);
        let y = eval_forward(&model, &store, &perturbed);
        assert!(!x[0].bitwise_eq(&y[0]), "{variant} should read metadata");
    }
}

#[test]
fn cross_modal_memory_is_constant_across_layers() {
    let mut c = small(ModelVariant::DfXm);
    c.l_aud = 2;
    c.l_xm = 3;
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(5).unwrap();
    let input = random_input(&c, 4, 2);
    let (_, trace) = traced_forward(&model, &store, &input);
    let mems: Vec<&Tensor> = trace
        .cross_memories
        .iter()
        .filter(|(tag, _)| tag == "ca_vid")
        .map(|(_, m)| m)
        .collect();
    // three layers for each of the two participants
    assert_eq!(mems.len(), 6);

    let w = model.weights(&store).unwrap();
    let mut ctx = ForwardCtx::eval();
    let u = embed_stream(
        &input.audio.as_ref().unwrap()[0],
        &input.metadata[0],
        &w.embed.audio,
        &w.embed.meta,
        true,
        &mut ctx,
    )
    .unwrap();
    let u_hat = w.sa_aud.as_ref().unwrap().forward(&u, &mut ctx).unwrap();
    for m in &mems[..3] {
        assert!(m.bitwise_eq(&u_hat));
    }
}

#[test]
fn df_xm_equals_hand_composition() {
    let mut c = small(ModelVariant::DfXm);
    c.d_w = 8;
    c.l_aud = 2;
    c.l_xm = 2;
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(6).unwrap();
    let input = random_input(&c, 3, 4);
    let out = eval_forward(&model, &store, &input);

    let sa = SaLayerWeights::load(&store, "sa_aud.layer0", c.heads).unwrap();
    let ca = CaLayerWeights::load(&store, "ca_vid.layer0", c.heads).unwrap();
    let head = HeadWeights {
        fc1: store.get("head.fc1").unwrap().clone(),
        fc2: store.get("head.fc2").unwrap().clone(),
        activation: HeadActivation::None,
    };
    let meta = store.get("embed.meta").unwrap();
    for p in 0..2 {
        let mut ctx = ForwardCtx::eval();
        let x = embed_stream(&input.video[p], &input.metadata[p], store.get("embed.video").unwrap(), meta, true, &mut ctx)
            .unwrap();
        let audio = &input.audio.as_ref().unwrap()[p];
        let u = embed_stream(audio, &input.metadata[p], store.get("embed.audio").unwrap(), meta, true, &mut ctx).unwrap();
        let u_hat = sa_encoder_forward(&u, &sa, 2, &mut ctx).unwrap();
        let x_hat = ca_encoder_forward(&x, &u_hat, &ca, 2, "ca_vid", &mut ctx).unwrap();
        let pred = regression_head(&x_hat, &head).unwrap();
        assert!(pred.bitwise_eq(&out[p]));
    }
}

#[test]
fn cross_subject_stage_equals_hand_composition() {
    let mut c = small(ModelVariant::DfXs);
    c.d_w = 8;
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(8).unwrap();
    let w = model.weights(&store).unwrap();
    let mut rng = RngStream::new(3);
    let a = random_matrix(3, 8, &mut rng);
    let b = random_matrix(3, 8, &mut rng);
    let mut ctx = ForwardCtx::eval();
    let (ha, hb) = cross_subject_stage(&a, &b, w.sa_sbj.as_ref().unwrap(), w.ca_sbj.as_ref().unwrap(), &mut ctx).unwrap();

    let sa = SaLayerWeights::load(&store, "sa_sbj.layer0", c.heads).unwrap();
    let ca = CaLayerWeights::load(&store, "ca_sbj.layer0", c.heads).unwrap();
    let s_a = sa_encoder_forward(&a, &sa, 1, &mut ctx).unwrap();
    let s_b = sa_encoder_forward(&b, &sa, 1, &mut ctx).unwrap();
    assert!(ha.bitwise_eq(&ca_encoder_forward(&s_a, &s_b, &ca, 1, "x", &mut ctx).unwrap()));
    assert!(hb.bitwise_eq(&ca_encoder_forward(&s_b, &s_a, &ca, 1, "x", &mut ctx).unwrap()));

    let (sa2, sb2) = cross_subject_stage(&b, &a, w.sa_sbj.as_ref().unwrap(), w.ca_sbj.as_ref().unwrap(), &mut ctx).unwrap();
    assert!(sa2.bitwise_eq(&hb) && sb2.bitwise_eq(&ha));
    assert!(cross_subject_stage(&a, &random_matrix(2, 8, &mut rng), w.sa_sbj.as_ref().unwrap(), w.ca_sbj.as_ref().unwrap(), &mut ctx).is_err());
}

#[test]
fn metadata_contributes_a_time_constant_offset() {
    let mut rng = RngStream::new(12);
    let features = random_matrix(5, 6, &mut rng);
    let m = random_matrix(1, 4, &mut rng);
    let proj = random_matrix(6, 8, &mut rng);
    let metaproj = random_matrix(4, 8, &mut rng);
    let mut ctx = ForwardCtx::eval();
    let with = embed_stream(&features, &m, &proj, &metaproj, true, &mut ctx).unwrap();
    let without = embed_stream(&features, &m, &proj, &metaproj, false, &mut ctx).unwrap();
    let diff = with.sub(&without).unwrap();
    let expected = m.matmul(&metaproj).unwrap();
    for t in 0..5 {
        for (a, b) in diff.row(t).unwrap().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // zero metadata reduces to projection plus positional encoding
    let zero = embed_stream(&features, &Tensor::zeros(&[1, 4]), &proj, &metaproj, true, &mut ctx).unwrap();
    let direct = features
        .matmul(&proj)
        .unwrap()
        .add(&crate::transformer::sinusoidal_positional_encoding(5, 8).unwrap())
        .unwrap();
    assert!(zero.values().iter().zip(direct.values()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn regression_head_properties() {
    let mut rng = RngStream::new(21);
    let head = HeadWeights {
        fc1: random_matrix(4, 16, &mut rng),
        fc2: random_matrix(16, 5, &mut rng),
        activation: HeadActivation::None,
    };
    let s = random_matrix(6, 4, &mut rng);
    let out = regression_head(&s, &head).unwrap();
    assert_eq!(out.shape(), &[1, 5]);

    // timestep order does not matter
    let rows: Vec<Vec<f64>> = (0..6).rev().map(|t| s.row(t).unwrap().to_vec()).collect();
    let reversed = regression_head(&Tensor::from_rows(&rows).unwrap(), &head).unwrap();
    assert!(out.values().iter().zip(reversed.values()).all(|(a, b)| (a - b).abs() < 1e-12));

    // constant sequence pools to its row
    let row = random_matrix(1, 4, &mut rng);
    let constant = Tensor::concat_rows(&[row.clone(), row.clone(), row.clone()]).unwrap();
    let direct = row.matmul(&head.fc1).unwrap().matmul(&head.fc2).unwrap();
    let pooled = regression_head(&constant, &head).unwrap();
    assert!(pooled.values().iter().zip(direct.values()).all(|(a, b)| (a - b).abs() < 1e-12));

    let zero_head = HeadWeights {
        fc2: Tensor::zeros(&[16, 5]),
        ..head
    };
    assert!(regression_head(&s, &zero_head).unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn bert_second_stage_sees_four_t_tokens() {
    let c = small(ModelVariant::BertBaseline);
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(9).unwrap();
    let t = 3;
    let (_, trace) = traced_forward(&model, &store, &random_input(&c, t, 3));
    let sizes: Vec<usize> = trace.attention_maps.iter().map(|m| m.dims2().unwrap().0).collect();
    // stage 1: 2 subjects × l_bm layers × heads maps of 2T rows, then stage 2
    let stage1 = 2 * c.l_bm * c.heads;
    assert!(sizes[..stage1].iter().all(|&n| n == 2 * t));
    assert!(sizes[stage1..].iter().all(|&n| n == 4 * t));
    assert_eq!(sizes.len() - stage1, 2 * c.l_bs * c.heads);
}

#[test]
fn attention_rows_are_distributions_in_full_model() {
    let c = small(ModelVariant::DfXmXs);
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(10).unwrap();
    let (_, trace) = traced_forward(&model, &store, &random_input(&c, 5, 8));
    assert!(!trace.attention_maps.is_empty());
    for map in &trace.attention_maps {
        let (r, _) = map.dims2().unwrap();
        for i in 0..r {
            let s: f64 = map.row(i).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn input_validation() {
    let c = small(ModelVariant::DfXm);
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(1).unwrap();
    let mut input = random_input(&c, 3, 1);
    input.audio = None;
    assert!(model.predict(&store, &input).is_err());

    let mut rng = RngStream::new(0);
    let bad = DyadInput::new(
        [random_matrix(3, 8, &mut rng), random_matrix(4, 8, &mut rng)],
        None,
        [random_matrix(1, 4, &mut rng), random_matrix(1, 4, &mut rng)],
    );
    assert!(bad.is_err());

    let wrong_width = DyadInput::new(
        [random_matrix(3, 7, &mut rng), random_matrix(3, 7, &mut rng)],
        Some([random_matrix(3, 6, &mut rng), random_matrix(3, 6, &mut rng)]),
        [random_matrix(1, 4, &mut rng), random_matrix(1, 4, &mut rng)],
    )
    .unwrap();
    assert!(model.predict(&store, &wrong_width).is_err());
}

#[test]
fn tf_v_ignores_audio() {
    let c = small(ModelVariant::TfV);
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(1).unwrap();
    let input = random_input(&c, 3, 1);
    let mut no_audio = input.clone();
    no_audio.audio = None;
    let x = eval_forward(&model, &store, &input);
    let y = eval_forward(&model, &store, &no_audio);
    assert!(x[0].bitwise_eq(&y[0]) && x[1].bitwise_eq(&y[1]));
    assert!(!store.get("embed.audio").unwrap().requires_grad());
}

#[test]
fn unshared_layers_are_distinct() {
    let mut c = small(ModelVariant::TfV);
    c.share_layers = false;
    c.l_sbj = 3;
    let model = Dyadformer::new(c.clone()).unwrap();
    let store = model.init_params(1).unwrap();
    assert!(store.iter().any(|(n, _)| n.starts_with("sa_vid.layer2.")));
    assert!(!store.iter().any(|(n, _)| n.starts_with("sa_vid.layer3.")));
    model.predict(&store, &random_input(&c, 3, 2)).unwrap();
}

fn model_loss<'a>(model: &'a Dyadformer, input: &'a DyadInput, targets: &[Tensor; 2]) -> impl Fn(&ParamStore) -> std::result::Result<Tensor, TensorError> + 'a {
    let targets = targets.clone();
    move |store: &ParamStore| {
        let preds = model.forward(store, input, &mut ForwardCtx::eval()).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        })?;
        let mut total: Option<Tensor> = None;
        for p in 0..2 {
            let d = preds[p].sub(&targets[p])?;
            let sq = d.mul(&d)?.sum()?;
            total = Some(match total {
                Some(t) => t.add(&sq)?,
                None => sq,
            });
        }
        Ok(total.expect("two participants"))
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in ModelVariant::ALL {
        let c = small(variant);
        let model = Dyadformer::new(c.clone()).unwrap();
        let store = model.init_params(13).unwrap();
        let input = random_input(&c, 3, 17);
        let mut rng = RngStream::new(19);
        let targets = [random_matrix(1, 5, &mut rng), random_matrix(1, 5, &mut rng)];
        let err = grad_check(model_loss(&model, &input, &targets), &store, 1e-5).unwrap();
        assert!(err < 1e-5, "{variant}: {err}");
    }
}
