mod common;

use cta_core::model::evaluate_accuracy;
use cta_core::pipeline::prepare;
use cta_core::streams::{make_domain_sequence, Corruption, CorruptionKind, Domain, DomainOrder, DomainStream};

#[test]
fn source_accuracy_does_not_rise_with_severity() {
    let mut cfg = common::small_config();
    cfg.stream.samples_per_domain = 600;
    let p = prepare(&cfg).unwrap();
    for kind in CorruptionKind::ALL {
        let domains: Vec<Domain> = (0..=5)
            .map(|s| Domain {
                corruption: Some(Corruption::new(kind, s).unwrap()),
            })
            .collect();
        let stream = p.stream.with_domains(domains);
        let accs: Vec<f64> = (0..=5)
            .map(|k| {
                let set = stream.domain_set(k).unwrap();
                100.0 * evaluate_accuracy(&p.source_model, &set.inputs, &set.labels).unwrap()
            })
            .collect();
        for w in accs.windows(2) {
            assert!(w[1] <= w[0] + 2.0, "{kind:?}: {accs:?}");
        }
    }
}

#[test]
fn default_sequence_has_six_domains_and_uniform_batches() {
    let all: Vec<Corruption> = CorruptionKind::ALL.iter().map(|&k| Corruption::new(k, 5).unwrap()).collect();
    let seq = make_domain_sequence(&all, DomainOrder::Shuffled, 9, true).unwrap();
    assert_eq!(seq.len(), 6);
    assert_eq!(seq.last(), Some(&Domain::clean()));
    let cfg = common::small_config();
    let task = cta_core::SyntheticTask::new(cfg.task.clone(), 0).unwrap();
    let stream = DomainStream::new(&task, seq, 100, 32, 0).unwrap();
    for k in 0..6 {
        let batches = stream.domain_batches(k).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.inputs.rows() == 32 && b.labels.len() == 32));
        assert!(batches.iter().all(|b| b.inputs.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
