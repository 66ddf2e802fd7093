use decore_core::decoder::{contrast_log_distributions, decore_step, generate, DecodeConfig, DecodeMode, MaskedModel};
use decore_core::tensor::{argmax, log_softmax, softmax};
use decore_core::zoo::{build_induction_model, check_contract, patterned_prompt, WiredModelSpec};
use decore_core::{forward, HeadMask, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wired() -> (WiredModelSpec, Model) {
    let spec = WiredModelSpec::default();
    let model = build_induction_model(&spec).unwrap();
    (spec, model)
}

fn copy_success(model: &Model, spec: &WiredModelSpec, mask: &HeadMask, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ok = 0;
    for _ in 0..n {
        let p = patterned_prompt(&mut rng, spec.vocab_size, spec.max_seq_len);
        let out = forward(&p.tokens, mask, model, false).unwrap();
        if argmax(out.last_logits()) == Some(p.expected as usize) {
            ok += 1;
        }
    }
    ok as f64 / n as f64
}

#[test]
fn contract_holds_on_1000_prompts() {
    let (spec, model) = wired();
    let report = check_contract(&model, &spec, 1000, 2024).unwrap();
    report.ensure(&spec).unwrap();
    assert_eq!(report.prompts, 1000);
}

#[test]
fn designated_head_is_the_only_one_whose_ablation_breaks_copying() {
    let (spec, model) = wired();
    for head in model.config().all_heads() {
        let rate = copy_success(&model, &spec, &HeadMask::new([head]), 300);
        if head == WiredModelSpec::RETRIEVAL_HEAD {
            assert!(rate < 0.05, "{head}: {rate}");
        } else {
            assert!(rate >= 0.95, "{head}: {rate}");
        }
    }
}

#[test]
fn greedy_continues_the_pattern() {
    let (_, model) = wired();
    let base = MaskedModel::unmasked(&model);
    let g = generate(&base, None, &[5, 9, 3, 5], &DecodeConfig::new(DecodeMode::Greedy, 1)).unwrap();
    assert_eq!(g.tokens, vec![9]);
}

#[test]
fn entropy_contrast_recovers_context_value_against_masked_amateur() {
    let (spec, model) = wired();
    // key 20 -> value 25 in context, memorized answer 0
    let prompt = [3u32, 7, 20, 25, 4, 9, 11, 20];
    let base = MaskedModel::unmasked(&model);
    let amateur = MaskedModel::new(&model, HeadMask::new([WiredModelSpec::RETRIEVAL_HEAD])).unwrap();
    let cfg = DecodeConfig::new(DecodeMode::DecoreEntropy, 1);
    let g = generate(&base, Some(&amateur), &prompt, &cfg).unwrap();
    assert_eq!(g.tokens, vec![25]);
    assert_ne!(g.tokens[0], spec.memorized_token);

    let greedy_masked = generate(&amateur, None, &prompt, &DecodeConfig::new(DecodeMode::Greedy, 1)).unwrap();
    assert_eq!(greedy_masked.tokens, vec![spec.memorized_token]);

    // the step, recomputed from raw logits
    let pb = softmax(forward(&prompt, &HeadMask::empty(), &model, false).unwrap().last_logits()).unwrap();
    let lb = log_softmax(forward(&prompt, &HeadMask::empty(), &model, false).unwrap().last_logits()).unwrap();
    let la = log_softmax(forward(&prompt, amateur.mask(), &model, false).unwrap().last_logits()).unwrap();
    let h: f64 = -pb.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let d = &g.diagnostics[0];
    assert!((d.alpha_used - h).abs() < 1e-12);
    let expected = contrast_log_distributions(&lb, &la, h).unwrap();
    assert_eq!(argmax(&expected), Some(25));
    let step = decore_step(&lb, Some(&la), DecodeMode::DecoreEntropy).unwrap();
    for (a, b) in step.log_probs.iter().zip(&g.step_log_probs[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ablating_every_head_leaves_only_the_bias() {
    let (spec, model) = wired();
    let all = HeadMask::all(model.config());
    let out = forward(&[1, 2, 3], &all, &model, false).unwrap();
    assert_eq!(argmax(out.last_logits()), Some(spec.memorized_token as usize));
}
