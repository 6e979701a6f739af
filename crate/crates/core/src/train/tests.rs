use super::*;
use crate::enhance::{enhance_corpus, EnhanceConfig, PromptStyle};
use crate::model::{ModelConfig, SlotTag, Special};
use crate::sim::{generate_corpus, ScreenConfig, TaskTemplate, TemplateMix};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_f: 8,
        n_latent: 2,
        ..ModelConfig::desk()
    }
}

fn corpus(episodes: usize, mix: &TemplateMix) -> EnhancedCorpus {
    let c = generate_corpus(2, episodes, mix, &ScreenConfig::for_size(32, 32)).unwrap();
    enhance_corpus(&c, &EnhanceConfig::for_model(&tiny_config(), PromptStyle::Compact)).unwrap()
}

fn quick(phase: Phase, epochs: usize) -> PhaseConfig {
    PhaseConfig {
        epochs,
        lr: 1e-2,
        ..PhaseConfig::reference(phase)
    }
}

#[test]
fn alignment_touches_only_the_projector() {
    let data = corpus(30, &TemplateMix::default());
    let mut m = Model::new(tiny_config()).unwrap();
    let before = m.params.snapshot();
    let trace = phase_align(&mut m, &data, &quick(Phase::Align, 1)).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].samples, data.stats.slow);
    let after = m.params.snapshot();
    let mut changed = 0;
    for (name, t) in &before {
        if is_projector(name) {
            changed += usize::from(after[name] != *t);
        } else {
            assert_eq!(after[name], *t, "{name}");
        }
    }
    assert!(changed > 0);
    assert!((0..m.params.len()).all(|id| m.params.is_trainable(id) || m.params.get(id).frozen));
}

#[test]
fn alignment_loss_falls_on_a_toy_corpus() {
    let data = corpus(95, &TemplateMix::default()).take(200);
    let mut m = Model::new(tiny_config()).unwrap();
    let trace = phase_align(&mut m, &data, &quick(Phase::Align, 3)).unwrap();
    assert!(trace[2].mean_loss < trace[0].mean_loss, "{trace:?}");
}

#[test]
fn alignment_needs_slow_samples() {
    let only_type = TemplateMix::from_pairs(&[(TaskTemplate::TypeText, 1.0)]);
    let data = corpus(5, &only_type);
    let mut m = Model::new(tiny_config()).unwrap();
    assert!(matches!(phase_align(&mut m, &data, &quick(Phase::Align, 1)), Err(Error::Config(_))));
}

#[test]
fn thought_phase_runs_both_stages() {
    let data = corpus(6, &TemplateMix::default());
    let mut m = Model::new(tiny_config()).unwrap();
    let frozen = m.params.value(m.params.id(crate::perception::ENC_WEIGHT).unwrap()).clone();
    let trace = phase_thought(&mut m, &data, &quick(Phase::Thought, 3)).unwrap();
    let stages: Vec<&str> = trace.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(stages, ["explicit", "explicit", "latent"]);
    assert_eq!(m.params.value(m.params.id(crate::perception::ENC_WEIGHT).unwrap()), &frozen);

    let s = &data.samples[0];
    let a = with_thought(s).unwrap();
    let b = a.position_of(Special::Bot).unwrap();
    assert_eq!(a.bytes_in(b + 1..b + 1 + s.thought.len()), s.thought.as_bytes());
    let latent = latent_swap(&a, 2).unwrap();
    assert_eq!(latent.count_tag(SlotTag::LatentThought), 2);

    let mut missing = data.clone();
    missing.samples[1].thought.clear();
    assert!(matches!(phase_thought(&mut m, &missing, &quick(Phase::Thought, 1)), Err(Error::Data(_))));
}

#[test]
fn latent_targets_never_enter_the_loss() {
    let data = corpus(4, &TemplateMix::default());
    let m = Model::new(tiny_config()).unwrap();
    let s = &data.samples[0];
    let px = data.image(s).unwrap();
    let seq = latent_swap(&with_thought(s).unwrap(), 2).unwrap();
    let mut probe = seq.clone();
    for i in 0..probe.len() {
        if probe.slot(i).tag().is_some() {
            probe.set_loss(i, true);
        }
    }
    assert_eq!(m.loss(&seq, Some(px)).unwrap().to_bits(), m.loss(&probe, Some(px)).unwrap().to_bits());
}

#[test]
fn finetune_supervises_the_decision_token() {
    let data = corpus(10, &TemplateMix::default());
    for s in &data.samples {
        let last = s.sequence.position_of(Special::Eot).unwrap();
        let decision = (last + 1..s.sequence.len())
            .find(|&i| s.sequence.loss_mask()[i])
            .unwrap();
        let is_bop = s.sequence.slot(decision).is_special(Special::Bop);
        assert_eq!(is_bop, s.path_label == PathLabel::Slow);
    }
}

#[test]
fn run_directory_is_reproducible() {
    let data = corpus(8, &TemplateMix::default());
    let mut recipe = Recipe::reference(3);
    for p in &mut recipe.phases {
        p.epochs = 1;
        p.lr = 5e-3;
    }
    let run = |dir: &Path| {
        let mut m = Model::new(tiny_config()).unwrap();
        let (trace, man) = run_recipe(&mut m, &data, "abc", &recipe, Some(dir)).unwrap();
        (m, trace, man.unwrap())
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (m1, t1, man1) = run(d1.path());
    let (_, t2, man2) = run(d2.path());
    assert_eq!(t1, t2);
    assert_eq!(man1, man2);
    assert_eq!(man1.phases.len(), 3);
    for f in [RUN_CONFIG_FILE, LOSS_TRACE_FILE, RUN_MANIFEST_FILE] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let last = checkpoint_dir(d1.path(), Phase::Finetune);
    let back = Model::load(&last).unwrap();
    let s = &data.samples[0];
    let px = data.image(s).unwrap();
    assert_eq!(back.loss(&s.sequence, Some(px)).unwrap(), m1.loss(&s.sequence, Some(px)).unwrap());
    assert_eq!(fs::read_to_string(d1.path().join(LOSS_TRACE_FILE)).unwrap().lines().count(), 3);
}

#[test]
fn recipe_order_is_checked() {
    let mut r = Recipe::reference(0);
    r.phases.swap(0, 2);
    assert!(r.validate().is_err());
    let skip = Recipe::reference(0).without(Phase::Thought);
    assert_eq!(skip.phases.len(), 2);
    skip.validate().unwrap();
    assert_eq!(PhaseConfig::reference(Phase::Align).lr, 2e-3);
    assert_eq!(PhaseConfig::reference(Phase::Thought).explicit_epochs(), 3);
}
