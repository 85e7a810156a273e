use retuner_core::harness::*;
use retuner_core::task::*;
use retuner_core::pipeline::*;
use retuner_core::seeds;
use retuner_core::perturb::{self, PerturbConfig, ConfusionLexicon, SampleToxicity};
use retuner_core::curation::{BuiltinDetector, PoisonDetector};
use retuner_core::trace::{InferenceTrace, JudgeMeta};
use rand::Rng;

// Standalone mirror of the stage protocol with full introspection.
#[test]
fn dissect_stage3() {
    let task = ToyTaskSpec::demo(1);
    let seed = 0u64;
    // clean base
    let mut pool_rng = seeds::rng(seed, "scan/pool");
    let clean_pool = generate_examples(&task, 60, &mut pool_rng).unwrap();
    let hyper = HyperConfig { epochs: 4, ..HyperConfig::default() };
    let base_model = train(&DatasetSpec::from_examples(clean_pool.clone(), 1, None, vec![]), &hyper).unwrap();

    // one stage at 40% poison, 350 train items
    let mut input_rng = seeds::rng(seed, "scan/inputs");
    let inputs = generate_examples(&task, 350, &mut input_rng).unwrap();
    let rates = perturb::rates_with_poison_rate(&perturb::default_rates(), 0.40);
    let pcfg = PerturbConfig { rates, median_length: 9, lexicon: Some(ConfusionLexicon::from_task(&task)) };
    let mut samples = vec![];
    for (i, e) in inputs.iter().enumerate() {
        let mut rng = seeds::rng(seed, &format!("scan/p{i}"));
        samples.push((e.clone(), perturb::perturb_sample(e, &pcfg, &mut rng)));
    }

    // naive training pairs with draw classification
    let mut draw_rng = seeds::rng(seed, "scan/draws");
    let mut pairs: Vec<Example> = vec![];
    let mut wrong = 0; let mut benign_wrong = 0; let mut junk = 0;
    let vocab = task.all_tokens();
    for (orig, p) in &samples {
        let (pred, _) = base_model.predict(&p.noisy_input);
        let fail = pred != p.recorded_target;
        let target = if !fail { pred.clone() } else {
            match p.toxicity {
                SampleToxicity::Clean => orig.target.clone(),
                SampleToxicity::Fixable => if draw_rng.random::<f64>() < 0.3 { pred.clone() } else { orig.target.clone() },
                SampleToxicity::Poisonous => {
                    let u = draw_rng.random::<f64>();
                    if u < 0.3 { pred.clone() }
                    else if u < 0.8 {
                        if p.recorded_target != orig.target { p.recorded_target.clone() }
                        else if pred != orig.target { pred.clone() }
                        else { p.recorded_target.clone() }
                    } else { orig.target.clone() }
                }
            }
        };
        let overlap = p.noisy_input.split_whitespace().filter(|t| vocab.contains(*t)).count();
        if target != orig.target {
            if overlap == 0 { junk += 1 } else { wrong += 1 }
        } else if p.toxicity == SampleToxicity::Poisonous && overlap > 0 {
            benign_wrong += 1;
        }
        pairs.push(Example::new(p.noisy_input.clone(), target, Slice::Gold, Provenance::CorrectedFailure));
    }
    println!("naive pairs: {} total, {} in-domain-wrong, {} junk-label, {} poison-but-right", pairs.len(), wrong, junk, benign_wrong);

    let naive_model = train(&DatasetSpec::from_examples(pairs, 2, None, vec![]), &hyper).unwrap();

    // adaptive pairs: filter + correct
    let det = BuiltinDetector::for_task(&task);
    let mut kept = clean_pool.clone();
    let mut filtered_out = 0;
    for (orig, p) in &samples {
        let (pred, _) = base_model.predict(&p.noisy_input);
        if pred == p.recorded_target { continue; }
        let t = InferenceTrace::new("x", p.noisy_input.clone(), pred, Some(p.recorded_target.clone()),
            Verdict::Fail, "r", JudgeMeta::exact_match(), "m");
        if det.assess(&t).poison { filtered_out += 1; continue; }
        kept.push(Example::new(p.noisy_input.clone(), p.recorded_target.clone(), Slice::Gold, Provenance::CorrectedFailure));
        let _ = orig;
    }
    println!("adaptive: kept {} (filtered {filtered_out})", kept.len());
    let adaptive_model = train(&DatasetSpec::from_examples(kept, 2, None, vec![]), &hyper).unwrap();

    // eval slices: clean fresh items, noisy-fixable items, per-label
    let mut eval_rng = seeds::rng(seed, "scan/eval");
    let clean_eval = generate_examples(&task, 400, &mut eval_rng).unwrap();
    for (name, model) in [("base", &base_model), ("naive", &naive_model), ("adaptive", &adaptive_model)] {
        let s_clean = score(model, &clean_eval).unwrap();
        // per-label on clean
        let mut per_label = vec![];
        for label in &task.labels {
            let items: Vec<Example> = clean_eval.iter().filter(|e| e.target == *label).cloned().collect();
            per_label.push((label.clone(), score(model, &items).unwrap()));
        }
        println!("{name}: clean {s_clean:.4} per-label {per_label:?}");
    }
}
