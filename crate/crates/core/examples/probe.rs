// Diagnostic: inspect pointer/classifier outputs of a trained checkpoint.
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use span_diffusion::corpus::SpanCodec;
use span_diffusion::denoiser::{load_checkpoint, BoundaryDenoiser};

fn main() {
    let (model, _) = load_checkpoint(std::env::args().nth(1).unwrap()).unwrap();
    let s = span_diffusion::corpus::Sentence::new(
        "p",
        ["w01", "w02", "<a", "w03", "a>", "w04", "<b", "w05", "b>", "w06"]
            .map(String::from)
            .to_vec(),
    )
    .unwrap();
    let enc = model.encode_sentence(&s).unwrap();
    let codec = SpanCodec::new(s.len(), 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_t = Array2::from_shape_fn((6, 2), |_| rng.sample::<f64, _>(StandardNormal));
    for t in [1000usize, 200] {
        let out = model.denoise(&x_t, &enc, t, &codec).unwrap();
        println!("t={t}");
        for k in 0..3 {
            let row: Vec<String> = out.p_left.row(k).iter().map(|v| format!("{v:.2}")).collect();
            println!("  P_l[{k}] = {row:?}");
            let row: Vec<String> = out.p_class.row(k).iter().map(|v| format!("{v:.2}")).collect();
            println!("  P_c[{k}] = {row:?}");
        }
    }
}
