mod common;

use common::{max_fd_error, perturbed_model, LossFixture, LossUnderTest};
use cta_core::model::ParamKind;
use cta_core::numerics::Tape;
use cta_core::TrainScope;

#[test]
fn losses_match_central_differences_in_both_scopes() {
    let model = perturbed_model(3);
    for scope in [TrainScope::BnAffine, TrainScope::FullExtractor] {
        for which in LossUnderTest::ALL {
            let err = max_fd_error(&model, scope, which, 12, 11);
            assert!(err <= 1e-4, "{which:?} / {scope:?}: relative error {err:e}");
        }
    }
}

#[test]
fn bn_affine_scope_tracks_only_norm_parameters() {
    let model = perturbed_model(5);
    let fx = LossFixture::new(&model, 2);
    let mut tape = Tape::new();
    let (loss, params) = fx.record(&mut tape, &model, TrainScope::BnAffine, LossUnderTest::Source).unwrap();
    assert!(params
        .tracked()
        .iter()
        .all(|k| matches!(k, ParamKind::Gamma(_) | ParamKind::Beta(_))));
    let grads = tape.gradients(loss).unwrap();
    for kind in model.param_kinds() {
        if !params.tracked().contains(&kind) {
            assert!(grads.get(params.var(kind)).unwrap().is_none(), "{kind:?} received a gradient");
        }
    }
}

#[test]
fn head_is_never_tracked() {
    let model = perturbed_model(6);
    let fx = LossFixture::new(&model, 4);
    for scope in [TrainScope::BnAffine, TrainScope::FullExtractor] {
        let mut tape = Tape::new();
        let (loss, params) = fx.record(&mut tape, &model, scope, LossUnderTest::EmaHard).unwrap();
        assert!(!params.tracked().contains(&ParamKind::Head));
        let grads = tape.gradients(loss).unwrap();
        assert!(grads.get(params.var(ParamKind::Head)).unwrap().is_none());
    }
}
