//! Tying and freezing checks, run by the test suite and the acceptance runner.

use twostage_core::data::NUM_SPECIALS;
use twostage_core::model::{
    extract_encoder, warm_start_seq2seq, CrossAttention, Model, TokenBatch,
};
use twostage_core::train::batch::frame;
use twostage_core::train::checkpoint;
use twostage_core::train::{
    apply_freeze_plan, initial_trainer, preset, run_plan, run_stage, run_stages, Checkpoint, Donor,
    FreezeTag, Init, Provenance, Scale, StagePosition, TrainPlan,
};
use twostage_core::{Error, Tensor};

use super::{random_ids, rng, small_config, toy_seq2seq_batch};

fn tiny_scale() -> Scale {
    Scale {
        d_model: 8,
        d_ffn: 16,
        attention_heads: 2,
        vocab_size: 24,
        max_positions: 12,
        dropout: 0.0,
        layer_divisor: 6,
        step_divisor: 100_000,
        lr_multiplier: 10.0,
        batch_size: 2,
        batch_tokens: 24,
    }
}

fn corpus(seed: u64) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..8).map(|_| random_ids(8, 24, &mut r)).collect()
}

fn encoder_snapshot(m: &Model) -> Vec<(String, Tensor)> {
    m.params
        .owners()
        .filter(|n| n.starts_with("encoder."))
        .map(|n| (n.to_string(), m.params.get(n).unwrap().clone()))
        .collect()
}

fn probe() -> TokenBatch {
    TokenBatch::from_seqs(&[frame(&[6, 7, 8, 9]), frame(&[10, 11])], 0)
}

pub fn warm_start_copies_encoder_and_ties_decoder_embedding() {
    let donor = Model::init(small_config(2, 0, CrossAttention::Standard), 1).unwrap();
    let cfg = small_config(2, 2, CrossAttention::Standard);
    let p = warm_start_seq2seq(&donor.params, &cfg, 2).unwrap();
    for name in donor.params.owners().filter(|n| n.starts_with("encoder.")) {
        assert!(
            p.get(name).unwrap().bit_eq(donor.params.get(name).unwrap()),
            "{name}"
        );
    }
    assert!(p.same_storage("decoder.embed_tokens", "encoder.embed_tokens"));
    assert_eq!(
        p.tie_groups(),
        vec![vec![
            "decoder.embed_tokens".to_string(),
            "encoder.embed_tokens".to_string()
        ]]
    );
    assert!(!p.contains("mlm_head.weight"));
}

pub fn warm_start_rejects_mismatched_donor() {
    let donor = Model::init(small_config(1, 0, CrossAttention::Standard), 1).unwrap();
    let err = warm_start_seq2seq(
        &donor.params,
        &small_config(2, 2, CrossAttention::Standard),
        2,
    )
    .unwrap_err();
    assert!(matches!(err, Error::ParamMismatch(_)));
}

pub fn lm_head_starts_as_embedding_copy_but_is_untied() {
    let donor = Model::init(small_config(2, 0, CrossAttention::Standard), 1).unwrap();
    let cfg = small_config(2, 2, CrossAttention::Standard);
    let p = warm_start_seq2seq(&donor.params, &cfg, 2).unwrap();
    assert!(p
        .get("lm_head.weight")
        .unwrap()
        .bit_eq(p.get("encoder.embed_tokens").unwrap()));
    assert!(!p.same_storage("lm_head.weight", "encoder.embed_tokens"));

    let mut m = Model::from_parts(cfg, p).unwrap();
    m.params.get_mut("lm_head.weight").unwrap().data_mut()[0] += 1.0;
    assert!(!m
        .params
        .get("lm_head.weight")
        .unwrap()
        .bit_eq(m.params.get("encoder.embed_tokens").unwrap()));
    assert!(m
        .params
        .get("decoder.embed_tokens")
        .unwrap()
        .bit_eq(m.params.get("encoder.embed_tokens").unwrap()));
}

pub fn extraction_copies_embedding_into_an_untied_mlm_head() {
    let s2s = Model::init(small_config(2, 2, CrossAttention::Standard), 3).unwrap();
    let (cfg, p) = extract_encoder(&s2s.params, &s2s.cfg).unwrap();
    assert_eq!(cfg.decoder_layers, 0);
    assert!(p
        .names()
        .all(|n| !n.starts_with("decoder.") && !n.starts_with("lm_head.")));
    assert!(p
        .get("mlm_head.weight")
        .unwrap()
        .bit_eq(p.get("encoder.embed_tokens").unwrap()));
    assert!(!p.same_storage("mlm_head.weight", "encoder.embed_tokens"));
    assert!(p.tie_groups().is_empty());
    assert!(p.names().all(|n| p.is_trainable(n)));
}

pub fn freezing_encoder_freezes_tied_decoder_embedding_only() {
    let mut m = Model::init(small_config(2, 2, CrossAttention::Standard), 4).unwrap();
    apply_freeze_plan(&mut m.params, &[FreezeTag::Encoder]).unwrap();
    for n in m.params.names() {
        let expect = !(n.starts_with("encoder.") || n == "decoder.embed_tokens");
        assert_eq!(m.params.is_trainable(n), expect, "{n}");
    }
    assert!(m.params.is_trainable("lm_head.weight"));
    apply_freeze_plan(&mut m.params, &[]).unwrap();
    assert!(m.params.names().all(|n| m.params.is_trainable(n)));
}

pub fn tag_matching_nothing_is_an_error() {
    let mut m = Model::init(small_config(2, 0, CrossAttention::Standard), 4).unwrap();
    assert!(matches!(
        apply_freeze_plan(&mut m.params, &[FreezeTag::Decoder]),
        Err(Error::EmptyFreezeTag(_))
    ));
    assert!(matches!(
        apply_freeze_plan(&mut m.params, &[FreezeTag::Fusion]),
        Err(Error::EmptyFreezeTag(_))
    ));
}

pub fn freezing_the_decoder_embedding_freezes_its_tied_encoder_owner() {
    let mut m = Model::init(small_config(2, 2, CrossAttention::Standard), 4).unwrap();
    apply_freeze_plan(&mut m.params, &[FreezeTag::DecoderEmbedding]).unwrap();
    assert!(!m.params.is_trainable("encoder.embed_tokens"));
    assert!(m.params.is_trainable("encoder.embed_positions"));
}

fn unfrz_plan() -> TrainPlan {
    preset("2stage-bart-12e12d-unfrz", &tiny_scale()).unwrap()
}

pub fn frozen_stage_is_bit_identical_and_unfreeze_moves_the_encoder() {
    let plan = unfrz_plan();
    let data = corpus(1);
    let mut t = initial_trainer(&plan, &data, 9).unwrap();
    let before = encoder_snapshot(&t.model);
    let states_before = t.model.encoder_states(&probe()).unwrap();
    let dec_before = t
        .model
        .params
        .get("decoder.layers.0.ffn.fc1.weight")
        .unwrap()
        .clone();

    let pos = StagePosition {
        offset: 0,
        plan_schedule: plan.schedule.as_ref(),
    };
    let noise = plan.noise_for(plan.stages[0].objective);
    run_stage(&mut t, &plan.stages[0], pos, &data, &noise, 9).unwrap();
    for (n, v) in &before {
        assert!(
            t.model.params.get(n).unwrap().bit_eq(v),
            "{n} moved while frozen"
        );
        assert!(!t.model.params.is_trainable(n));
    }
    let states_after = t.model.encoder_states(&probe()).unwrap();
    assert!(states_before
        .iter()
        .zip(&states_after)
        .all(|(a, b)| a.bit_eq(b)));
    assert!(!t
        .model
        .params
        .get("decoder.layers.0.ffn.fc1.weight")
        .unwrap()
        .bit_eq(&dec_before));
    assert!(t.state.moments.keys().all(|k| !k.starts_with("encoder.")));

    let pos = StagePosition {
        offset: plan.stages[0].steps,
        plan_schedule: plan.schedule.as_ref(),
    };
    let trace = run_stage(&mut t, &plan.stages[1], pos, &data, &noise, 9).unwrap();
    assert_eq!(trace[0].step, plan.stages[0].steps + 1);
    assert!(before.iter().all(|(n, _)| t.model.params.is_trainable(n)));
    let moved = before
        .iter()
        .filter(|(n, v)| !t.model.params.get(n).unwrap().bit_eq(v))
        .count();
    assert_eq!(
        moved,
        before.len(),
        "every encoder tensor gets a gradient once unfrozen"
    );
}

pub fn unfreezing_starts_moments_at_zero() {
    let plan = unfrz_plan();
    let data = corpus(2);
    let mut t = initial_trainer(&plan, &data, 4).unwrap();
    let noise = plan.noise_for(plan.stages[0].objective);
    let pos = StagePosition {
        offset: 0,
        plan_schedule: plan.schedule.as_ref(),
    };
    run_stage(&mut t, &plan.stages[0], pos, &data, &noise, 4).unwrap();

    apply_freeze_plan(&mut t.model.params, &plan.stages[1].freeze).unwrap();
    t.state.retain_trainable(&t.model.params);
    assert!(t.state.moments.keys().all(|k| !k.starts_with("encoder.")));

    let batch = toy_seq2seq_batch(24, &mut rng(0));
    let grads = {
        let mut g = twostage_core::Graph::new();
        let mut b = twostage_core::model::Binder::new(&t.model.params);
        let l =
            twostage_core::train::seq2seq_forward(&t.model, &mut g, &mut b, &batch, None).unwrap();
        b.gradients(&g.backward(l).unwrap())
    };
    t.update(1e-3, "unfrozen", 1, |m, g, b| {
        twostage_core::train::seq2seq_forward(m, g, b, &batch, None)
    })
    .unwrap();
    let (b1, b2) = (t.optimizer.beta1, t.optimizer.beta2);
    for name in [
        "encoder.embed_positions",
        "encoder.layers.0.attn.q.weight",
        "encoder.final_norm.gain",
    ] {
        let mom = &t.state.moments[name];
        assert_eq!(mom.step, 1);
        for (i, &gi) in grads[name].data().iter().enumerate() {
            assert_eq!(mom.m.data()[i], b1 * 0.0 + (1.0 - b1) * gi, "{name}[{i}] m");
            assert_eq!(
                mom.v.data()[i],
                b2 * 0.0 + (1.0 - b2) * gi * gi,
                "{name}[{i}] v"
            );
        }
    }
    // Decoder moments carried over from the frozen stage.
    assert!(t.state.moments["decoder.layers.0.ffn.fc1.weight"].step > 1);
}

pub fn lr_is_continuous_across_the_unfreeze_boundary() {
    let plan = unfrz_plan();
    let run = run_plan(&plan, &corpus(3), 5).unwrap();
    let schedule = plan.schedule.unwrap();
    let records: Vec<_> = run.traces.iter().flat_map(|t| t.records.iter()).collect();
    assert_eq!(
        records.len() as u64,
        plan.stages.iter().map(|s| s.steps).sum::<u64>()
    );
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r.step, k as u64 + 1);
        assert_eq!(r.lr, schedule.lr_at(r.step).unwrap());
    }
}

pub fn recipe1_never_holds_decoder_parameters() {
    let plan = preset("bart-12e12d+mlm", &tiny_scale()).unwrap();
    let data = corpus(4);
    let t = initial_trainer(&plan, &data, 6).unwrap();
    let no_decoder = |m: &Model| {
        m.params
            .names()
            .all(|n| !n.starts_with("decoder.") && !n.starts_with("lm_head."))
    };
    assert!(no_decoder(&t.model));
    assert!(t
        .model
        .params
        .get("mlm_head.weight")
        .unwrap()
        .bit_eq(t.model.params.get("encoder.embed_tokens").unwrap()));
    let run = run_stages(t, &plan, &data, 6).unwrap();
    assert!(no_decoder(&run.trainer.model));
}

pub fn recipe2_starts_from_donor_encoder_states() {
    let scale = tiny_scale();
    let donor_plan = preset("roberta-12e", &scale).unwrap();
    let data = corpus(5);
    let donor = run_plan(&donor_plan, &data, 11).unwrap().trainer.model;
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(
        dir.path(),
        &Checkpoint {
            model: donor.clone(),
            optimizer: None,
            provenance: Provenance::default(),
            config_hash: String::new(),
        },
    )
    .unwrap();
    for name in ["2stage-bart-12e12d", "2stage-bart-12e12d-attn-f"] {
        let mut plan = preset(name, &scale).unwrap();
        plan.init = Init::WarmStartEncoder(Donor::Checkpoint(dir.path().to_path_buf()));
        let t = initial_trainer(&plan, &data, 12).unwrap();
        let a = donor.encoder_states(&probe()).unwrap();
        let b = t.model.encoder_states(&probe()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)), "{name}");
    }
}

pub fn specials_stay_out_of_toy_corpora() {
    assert!(corpus(0)
        .iter()
        .flatten()
        .all(|&t| t as usize >= NUM_SPECIALS));
}

pub const CASES: &[(&str, fn())] = &[
    (
        "warm_start_copies_encoder_and_ties_decoder_embedding",
        warm_start_copies_encoder_and_ties_decoder_embedding,
    ),
    (
        "warm_start_rejects_mismatched_donor",
        warm_start_rejects_mismatched_donor,
    ),
    (
        "lm_head_starts_as_embedding_copy_but_is_untied",
        lm_head_starts_as_embedding_copy_but_is_untied,
    ),
    (
        "extraction_copies_embedding_into_an_untied_mlm_head",
        extraction_copies_embedding_into_an_untied_mlm_head,
    ),
    (
        "freezing_encoder_freezes_tied_decoder_embedding_only",
        freezing_encoder_freezes_tied_decoder_embedding_only,
    ),
    (
        "tag_matching_nothing_is_an_error",
        tag_matching_nothing_is_an_error,
    ),
    (
        "freezing_the_decoder_embedding_freezes_its_tied_encoder_owner",
        freezing_the_decoder_embedding_freezes_its_tied_encoder_owner,
    ),
    (
        "frozen_stage_is_bit_identical_and_unfreeze_moves_the_encoder",
        frozen_stage_is_bit_identical_and_unfreeze_moves_the_encoder,
    ),
    (
        "unfreezing_starts_moments_at_zero",
        unfreezing_starts_moments_at_zero,
    ),
    (
        "lr_is_continuous_across_the_unfreeze_boundary",
        lr_is_continuous_across_the_unfreeze_boundary,
    ),
    (
        "recipe1_never_holds_decoder_parameters",
        recipe1_never_holds_decoder_parameters,
    ),
    (
        "recipe2_starts_from_donor_encoder_states",
        recipe2_starts_from_donor_encoder_states,
    ),
    (
        "specials_stay_out_of_toy_corpora",
        specials_stay_out_of_toy_corpora,
    ),
];
