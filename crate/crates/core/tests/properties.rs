use proptest::prelude::*;

use slowfast::action::{classify_perception, normalize_foreign, ActionDecision, ActionType, ForeignAction, PathLabel, Point, SourceSpace};
use slowfast::control::{Controller, InferenceMode, StepTrace};
use slowfast::enhance::{enhance_corpus, validate_sample, EnhanceConfig, PromptStyle};
use slowfast::eval::compute_ams;
use slowfast::model::{Model, ModelConfig, Special};
use slowfast::rng::CounterRng;
use slowfast::sim::{generate_corpus, generate_screen, render_pixels, Corpus, ScreenConfig, TemplateMix};
use slowfast::tensor::{grad_check, Graph, ParamStore, Tensor, Var};

fn tensor(rng: &mut CounterRng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal() * std).collect()).unwrap()
}

fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, offset: usize) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (q, k, v) = (g.input(q.clone()).unwrap(), g.input(k.clone()).unwrap(), g.input(v.clone()).unwrap());
    let y = g.attention(q, k, v, heads, offset, true).unwrap();
    g.value(y).clone()
}

/// Two-block network touching most primitives, reduced to a scalar with
/// fixed random weights.
fn composite(g: &mut Graph, p: &[Var], w: &Tensor) -> slowfast::Result<Var> {
    let h = g.matmul(p[0], p[1])?;
    let h = g.layer_norm(h, p[2], p[3], 1e-5)?;
    let h = g.gelu(h)?;
    let a = g.attention(h, h, h, 2, 0, false)?;
    let s = g.softmax(a, 1)?;
    let t = g.tanh(h)?;
    let m = g.mul(s, t)?;
    let w = g.input(w.clone())?;
    let m = g.mul(m, w)?;
    g.sum(m)
}

fn trace(i: usize, action: Option<ActionDecision>) -> StepTrace {
    StepTrace {
        episode_id: i,
        step: 0,
        mode: InferenceMode::Adaptive,
        path: PathLabel::Fast,
        action_text: String::new(),
        action,
        us_elapsed: 0,
        tokens: 0,
        perception_invocations: 0,
        bops: 0,
        bop_margin: 0.0,
    }
}

fn random_action(rng: &mut CounterRng) -> ActionDecision {
    let p = |rng: &mut CounterRng| Point::from_units(rng.below(10_001) as u16, rng.below(10_001) as u16).unwrap();
    match rng.below(5) {
        0 => ActionDecision::click(p(rng)),
        1 => ActionDecision::select(p(rng)),
        2 => ActionDecision::type_text(["a", "b"][rng.below(2) as usize]),
        3 => ActionDecision::scroll(ActionType::ScrollUp).unwrap(),
        _ => ActionDecision::bare(ActionType::PressBack),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, c in -50.0f64..50.0) {
        let mut rng = CounterRng::new(seed);
        let x = tensor(&mut rng, rows, cols, 5.0);
        let shifted = Tensor::matrix(rows, cols, x.data().iter().map(|v| v + c).collect()).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (a, b) = (g.input(x).unwrap(), g.input(shifted).unwrap());
        let (sa, sb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
        for r in 0..rows {
            prop_assert!((g.value(sa).row_slice(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-12);
    }

    #[test]
    fn causal_rows_ignore_later_keys_and_values(seed in any::<u64>(), n in 2usize..9, heads in 1usize..4) {
        let mut rng = CounterRng::new(seed);
        let q = tensor(&mut rng, n, heads * 3, 1.0);
        let k = tensor(&mut rng, n, heads * 3, 1.0);
        let v = tensor(&mut rng, n, heads * 2, 1.0);
        let t = rng.below(n as u64 - 1) as usize;
        let (mut k2, mut v2) = (k.clone(), v.clone());
        let (kc, vc) = (k.cols(), v.cols());
        k2.data_mut()[(t + 1) * kc..].iter_mut().for_each(|x| *x += rng.normal() * 10.0);
        v2.data_mut()[(t + 1) * vc..].iter_mut().for_each(|x| *x -= rng.normal() * 10.0);
        let (a, b) = (attend(&q, &k, &v, heads, 0), attend(&q, &k2, &v2, heads, 0));
        for r in 0..=t {
            for (x, y) in a.row_slice(r).iter().zip(b.row_slice(r)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn primitives_leave_inputs_alone_and_repeat_bitwise(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let mut store = ParamStore::new();
        let ids = [
            store.add("a", tensor(&mut rng, 4, 3, 1.0)).unwrap(),
            store.add("b", tensor(&mut rng, 3, 4, 1.0)).unwrap(),
            store.add("g", tensor(&mut rng, 1, 4, 1.0)).unwrap(),
            store.add("beta", tensor(&mut rng, 1, 4, 1.0)).unwrap(),
        ];
        let w = tensor(&mut rng, 4, 4, 1.0);
        let before = store.snapshot();
        let run = || {
            let mut g = Graph::new(&store);
            let p: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            let out = composite(&mut g, &p, &w).unwrap();
            let grads = g.backward(out).unwrap();
            let inputs_intact = ids.iter().zip(&p).all(|(&i, &v)| g.value(v) == store.value(i));
            (g.value(out).item().to_bits(), grads.param_grad(ids[0]).unwrap().to_vec(), inputs_intact)
        };
        let (x, gx, ok1) = run();
        let (y, gy, ok2) = run();
        prop_assert!(ok1 && ok2);
        prop_assert_eq!(x, y);
        prop_assert_eq!(gx, gy);
        prop_assert!(store.snapshot() == before);
    }

    #[test]
    fn foreign_actions_normalize_deterministically_to_valid_actions(
        seed in any::<u64>(), x in 0.0f64..=1.0, y in 0.0f64..=1.0, text in "[a-z][a-z ]{0,10}[a-z]"
    ) {
        let tables: serde_json::Value = serde_json::from_str(include_str!("../data/action_maps.json")).unwrap();
        let mut rng = CounterRng::new(seed);
        for (space, kinds) in tables["spaces"].as_object().unwrap() {
            let space: SourceSpace = space.parse().unwrap();
            for kind in kinds.as_object().unwrap().keys() {
                let dir = *rng.choose(&["up", "down", "left", "right"]);
                let f = ForeignAction::new(kind).at(x, y).with_text(&text).toward(dir);
                let a = normalize_foreign(&f, space).unwrap();
                prop_assert!(a.validate().is_ok());
                prop_assert_eq!(normalize_foreign(&f, space).unwrap(), a);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = CounterRng::new(seed);
        let mut store = ParamStore::new();
        let ids = [
            store.add("a", tensor(&mut rng, 4, 3, 0.8)).unwrap(),
            store.add("b", tensor(&mut rng, 3, 4, 0.8)).unwrap(),
            store.add("g", tensor(&mut rng, 1, 4, 0.8)).unwrap(),
            store.add("beta", tensor(&mut rng, 1, 4, 0.8)).unwrap(),
        ];
        let w = tensor(&mut rng, 4, 4, 1.0);
        let r = grad_check(&mut store, 1e-4, 64, seed, |g| {
            let p: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            composite(g, &p, &w)
        }).unwrap();
        prop_assert!(r.max_rel_error <= 1e-4, "{:?}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn screens_are_sound(seed in any::<u64>(), size in prop::sample::select(vec![32u32, 64])) {
        let s = generate_screen(seed, &ScreenConfig::for_size(size, size)).unwrap();
        let mut ids: Vec<u32> = s.elements.iter().map(|e| e.id).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), s.elements.len());
        for (i, a) in s.elements.iter().enumerate() {
            let (x0, y0, x1, y1) = a.normalized_bbox(size, size);
            prop_assert!(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0);
            for b in &s.elements[i + 1..] {
                prop_assert!(!a.bbox.intersects(&b.bbox));
            }
        }
        prop_assert!(render_pixels(size, size, &s.elements) == s.pixels);
    }

    #[test]
    fn enhanced_samples_are_well_formed_and_per_step(seed in any::<u64>(), n_latent in 0usize..5) {
        let sc = ScreenConfig::for_size(32, 32);
        let corpus = generate_corpus(seed, 6, &TemplateMix::default(), &sc).unwrap();
        let cfg = EnhanceConfig::for_model(&ModelConfig { n_latent, ..ModelConfig::desk() }, PromptStyle::Compact);
        let all = enhance_corpus(&corpus, &cfg).unwrap();
        prop_assert_eq!(all.samples.len(), corpus.step_count());
        for s in &all.samples {
            prop_assert!(validate_sample(s, n_latent).is_ok());
            prop_assert_eq!(s.path_label, classify_perception(&s.target_action));
            let triple = s.sequence.count_special(Special::Bop) == 1
                && s.sequence.count_special(Special::Ctrl) == 1
                && s.sequence.count_special(Special::Eop) == 1;
            let none = s.sequence.count_special(Special::Bop) == 0;
            let framed = if s.path_label == PathLabel::Slow { triple } else { none };
            prop_assert!(framed);
        }
        for (i, ep) in corpus.episodes.iter().enumerate() {
            let single = Corpus { manifest: corpus.manifest.clone(), episodes: vec![ep.clone()] };
            let alone = enhance_corpus(&single, &cfg).unwrap();
            let mine: Vec<_> = all.samples.iter().filter(|s| s.episode == i).collect();
            prop_assert_eq!(alone.samples.len(), mine.len());
            for (a, b) in alone.samples.iter().zip(mine) {
                prop_assert_eq!(&a.sequence, &b.sequence);
                prop_assert_eq!(&a.target_action, &b.target_action);
                prop_assert_eq!(&a.image_ref, &b.image_ref);
            }
        }
    }

    #[test]
    fn ams_ignores_step_order(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = CounterRng::new(seed);
        let gt: Vec<ActionDecision> = (0..n).map(|_| random_action(&mut rng)).collect();
        let pred: Vec<Option<ActionDecision>> = gt
            .iter()
            .map(|a| match rng.below(3) {
                0 => Some(a.clone()),
                1 => Some(random_action(&mut rng)),
                _ => None,
            })
            .collect();
        let traces: Vec<StepTrace> = pred.iter().enumerate().map(|(i, p)| trace(i, p.clone())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let t2: Vec<StepTrace> = order.iter().map(|&i| traces[i].clone()).collect();
        let g2: Vec<ActionDecision> = order.iter().map(|&i| gt[i].clone()).collect();
        let (a, b) = (compute_ams(&traces, &gt, 0.14).unwrap(), compute_ams(&t2, &g2, 0.14).unwrap());
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn slow_path_adds_work_beyond_the_decoded_action(seed in any::<u64>()) {
        let model = Model::new(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_f: 8,
            seed,
            ..ModelConfig::desk()
        })
        .unwrap();
        let c = Controller::new(&model, EnhanceConfig::for_model(&model.config, PromptStyle::Compact));
        let screen = generate_screen(seed, &ScreenConfig::for_size(32, 32)).unwrap();
        let run = |m| c.predict_step(&screen.pixels, "tap the mail icon", &[], m).unwrap();
        let (f, a, s) = (run(InferenceMode::ForcedFast), run(InferenceMode::Adaptive), run(InferenceMode::ForcedSlow));
        let net = |t: &StepTrace| t.tokens - t.action_text.len();
        prop_assert!(net(&f) < net(&s));
        let same = if a.path == PathLabel::Slow { &s } else { &f };
        prop_assert_eq!((a.tokens, &a.action_text), (same.tokens, &same.action_text));
        let again = run(InferenceMode::Adaptive);
        prop_assert_eq!((&again.action_text, again.path, again.tokens), (&a.action_text, a.path, a.tokens));
    }
}
