// Diagnostic: candidate scores on dev sentences for a trained checkpoint.
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use span_diffusion::corpus::{load_dataset, DatasetFormat, LabelVocab};
use span_diffusion::denoiser::load_checkpoint;
use span_diffusion::sampler::{sample_entities, postprocess, SamplerConfig};
use span_diffusion::schedule::VarianceSchedule;
use span_diffusion::corpus::SpanCodec;

fn main() {
    let ckpt = std::env::args().nth(1).unwrap();
    let (model, _) = load_checkpoint(&ckpt).unwrap();
    let ds = load_dataset("/tmp/syn/dev.jsonl", DatasetFormat::SpanJson, LabelVocab::new()).unwrap();
    let sched = VarianceSchedule::new(span_diffusion::schedule::ScheduleKind::Cosine, 1000).unwrap();
    let cfg = SamplerConfig { k_eval: 60, gamma: 5, phi: 2.5, seed: 0 };
    for (sentence, gold) in ds.items.iter().take(3) {
        let enc = model.encode_sentence(sentence).unwrap();
        let codec = SpanCodec::new(sentence.len(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands = sample_entities(&model, &enc, &cfg, &sched, &codec, &mut rng).unwrap();
        let mut sorted = cands.clone();
        sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        println!("sentence {} M={} gold={:?}", sentence.id, sentence.len(),
            gold.entities.iter().map(|e| (e.left, e.right, e.label)).collect::<Vec<_>>());
        for c in sorted.iter().take(6) {
            println!("  cand ({},{}) label {} score {:.3} type_p {:.3} null_p {:.3}",
                c.left, c.right, c.label, c.score, c.type_prob, c.null_prob);
        }
        let post = postprocess(&cands, 2.5);
        println!("  after postprocess at phi=2.5: {} entities", post.len());
    }
}
