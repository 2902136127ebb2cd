//! Memorization run: a tiny corpus driven to near-zero reconstruction loss
//! proves the encoder, bottleneck, decoder, and optimizer actually fit
//! together, not just that each piece passes its own checks.

use std::collections::HashSet;

use bovae::{Autoencoder, BottleneckMode, ModelConfig, Rng, TokenSequence};

fn tiny_corpus(rng: &mut Rng, n: usize, vocab: usize) -> Vec<TokenSequence> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.range(3, 6);
        let ids: Vec<usize> = (0..len).map(|_| rng.range(4, vocab - 1)).collect();
        if seen.insert(ids.clone()) {
            out.push(TokenSequence { ids });
        }
    }
    out
}

#[test]
fn thirty_two_sequences_are_memorized_in_two_thousand_steps() {
    let mut rng = Rng::new(2024);
    let vocab = 16;
    let corpus = tiny_corpus(&mut rng, 32, vocab);

    let cfg = ModelConfig {
        d: 16,
        max_len: 8,
        n_max: 8,
        denoise_p: 0.0,
        lambda_l0: 0.0,
        lr: 1e-3,
        batch_size: 8,
        steps: 2000,
        val_interval: 250,
        ..ModelConfig::default()
    };
    let mut ae = Autoencoder::new(vocab, BottleneckMode::Bov, &cfg, &mut rng).unwrap();
    let report = ae.pretrain(&corpus, &corpus, &mut rng).unwrap();

    let (nll, _) = ae.validate(&corpus).unwrap();
    assert!(
        nll < 0.1,
        "mean NLL {nll:.4} after {} steps (best val {:.4} at step {})",
        cfg.steps,
        report.best_val_nll,
        report.best_step
    );

    let mut exact = 0;
    for seq in &corpus {
        let z = ae.latent(seq).unwrap();
        let decoded = ae.greedy_decode(&z, cfg.max_len).unwrap();
        if decoded.ids == seq.ids {
            exact += 1;
        }
    }
    assert!(exact >= 30, "only {exact}/32 sequences round-trip exactly");
}
