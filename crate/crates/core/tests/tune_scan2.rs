use retuner_core::harness::*;
use retuner_core::task::*;
use retuner_core::pipeline::*;
use retuner_core::seeds;
use retuner_core::perturb::{self, PerturbConfig, ConfusionLexicon, SampleToxicity};

#[test]
fn eval_composition_analysis() {
    let task = ToyTaskSpec::demo(1);
    // regenerate what the stage protocol sees at each poison rate
    for rate in [0.15f64, 0.25, 0.40] {
        let mut input_rng = seeds::rng(99, "inputs");
        let inputs = generate_examples(&task, 1000, &mut input_rng).unwrap();
        let rates = perturb::rates_with_poison_rate(&perturb::default_rates(), rate);
        let cfg = PerturbConfig { rates, median_length: 9, lexicon: Some(ConfusionLexicon::from_task(&task)) };
        let mut clean = 0; let mut fixable = 0; let mut poison = 0;
        let mut replaced = 0; // off-domain style: no task tokens at all
        let vocab = task.all_tokens();
        for (i, e) in inputs.iter().enumerate() {
            let mut rng = seeds::rng(99, &format!("p{i}"));
            let p = perturb::perturb_sample(e, &cfg, &mut rng);
            match p.toxicity {
                SampleToxicity::Clean => clean += 1,
                SampleToxicity::Fixable => fixable += 1,
                SampleToxicity::Poisonous => {
                    poison += 1;
                    let overlap = p.noisy_input.split_whitespace().filter(|t| vocab.contains(*t)).count();
                    if overlap == 0 { replaced += 1; }
                }
            }
        }
        println!("rate {rate}: clean {clean} fixable {fixable} poison {poison} (fully-replaced {replaced})");
    }

    // train both arms per the stage protocol on ONE seed and break down
    // final scores by eval slice
    let cfg = StageConfig::default();
    let out = run_stages_single(&cfg, &task, 0).unwrap();
    println!("checkpoints: {:?}",
        out.trajectory.checkpoints.iter().map(|c| (c.adaptive_score, c.naive_score)).collect::<Vec<_>>());
    // rebuild arms' final models isn't exposed; approximate: score slices via eval set toxicity
    // using hidden info is not possible here; instead classify by token overlap
    let vocab = task.all_tokens();
    let (mut in_domain, mut oov) = (0, 0);
    for e in &out.eval_set {
        let overlap = e.input.split_whitespace().filter(|t| vocab.contains(*t)).count();
        if overlap == 0 { oov += 1 } else { in_domain += 1 }
    }
    println!("eval: in-domain {in_domain}, fully-OOV {oov} of {}", out.eval_set.len());
}
