mod common;

use std::collections::BTreeSet;

use compt_core::tasks::{generate_task_family, sample_kshot};
use compt_core::{FamilySpec, GroupSpec, RuleBase};

use common::{family, world};

#[test]
fn families_are_seeded_and_splits_disjoint() {
    let w = world();
    let a = generate_task_family(&w, &family(), 5).unwrap();
    assert_eq!(a, generate_task_family(&w, &family(), 5).unwrap());
    assert_ne!(a, generate_task_family(&w, &family(), 6).unwrap());
    for t in &a {
        let seqs = |s: &[compt_core::Example]| s.iter().map(|e| e.tokens.clone()).collect::<BTreeSet<_>>();
        let (tr, dv, te) = (seqs(&t.train), seqs(&t.dev), seqs(&t.test));
        assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
        assert_eq!((t.train.len(), t.dev.len(), t.test.len()), (16, 8, 12));
        for split in [&t.train, &t.test] {
            let zeros = split.iter().filter(|e| e.label == t.spec.label_tokens[0]).count();
            assert_eq!(2 * zeros, split.len());
        }
    }
}

#[test]
fn negated_groups_flip_every_label() {
    let w = world();
    let spec = FamilySpec {
        groups: vec![
            GroupSpec::new("a", 1, RuleBase::Random, 0.0),
            GroupSpec::new("b", 1, RuleBase::Negate("a".into()), 0.0),
            GroupSpec::new("c", 1, RuleBase::Share("a".into()), 0.0),
        ],
        ..family()
    };
    let t = generate_task_family(&w, &spec, 2).unwrap();
    for e in &t[0].test {
        assert_eq!(t[2].spec.clean_label(&w, &e.tokens), e.label);
        assert_eq!(t[1].spec.clean_label(&w, &e.tokens), 1 - e.label);
    }
}

#[test]
fn groups_must_reference_earlier_groups() {
    let spec = FamilySpec {
        groups: vec![GroupSpec::new("b", 1, RuleBase::Negate("a".into()), 0.0)],
        ..family()
    };
    assert!(generate_task_family(&world(), &spec, 1).is_err());
    let dup = FamilySpec {
        groups: vec![GroupSpec::new("a", 1, RuleBase::Random, 0.0), GroupSpec::new("a", 1, RuleBase::Random, 0.0)],
        ..family()
    };
    assert!(generate_task_family(&world(), &dup, 1).is_err());
}

#[test]
fn kshot_draws_are_balanced_subsets() {
    let t = &generate_task_family(&world(), &family(), 5).unwrap()[0];
    let shots = sample_kshot(t, 8, 3).unwrap();
    assert_eq!(shots, sample_kshot(t, 8, 3).unwrap());
    assert!(shots.iter().all(|e| t.train.contains(e)));
    assert_eq!(shots.iter().filter(|e| e.label == 0).count(), 4);
    assert!(sample_kshot(t, 17, 3).is_err());
    assert!(sample_kshot(t, 0, 3).is_err());
}
