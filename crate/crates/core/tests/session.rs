use phasekd::checkpoint::Checkpoint;
use phasekd::data::{generate_dataset, DomainSpec};
use phasekd::networks::{Network, NetworkSpec};
use phasekd::train::{self, Session, TrainingConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(variant: Variant) -> (Session, phasekd::data::Split) {
    let (_, tgt) = generate_dataset(6, &DomainSpec::reference_source(), &DomainSpec::reference_target(), 3).unwrap();
    let teacher = Network::new(NetworkSpec::teacher(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cfg = TrainingConfig { variant, epochs: 1, batch_size: 16, ..TrainingConfig::default() };
    (Session::new(cfg, teacher, NetworkSpec::student()).unwrap(), tgt.train().unwrap())
}

#[test]
fn session_checkpoint_restores_networks_for_evaluation() {
    let (mut session, split) = setup(Variant::Full);
    session.run(&split, &split, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    session.checkpoint().unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), session.checkpoint().unwrap().to_bytes().unwrap());

    let mut student = train::network_from_checkpoint(&ck, "student").unwrap();
    let mut live = session.student.clone();
    assert_eq!(train::evaluate(&mut student, &split).unwrap(), train::evaluate(&mut live, &split).unwrap());

    let teacher = train::network_from_checkpoint(&ck, "teacher").unwrap();
    for (a, b) in teacher.store.entries().iter().zip(session.teacher.store.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn unknown_store_is_rejected() {
    let (session, _) = setup(Variant::NoBoth);
    let ck = session.checkpoint().unwrap();
    assert!(train::network_from_checkpoint(&ck, "mapping").is_err());
}
