//! Writes a synthetic annotated corpus for trying the `qflaw` pipeline.
//!
//! Usage: `cargo run -p qflaw-core --example make_corpus -- <dir> [n] [seed]`

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().ok_or("usage: make_corpus <dir> [n] [seed]")?;
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(120);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let corpus = qflaw_core::synth::annotated_corpus(n, 64, seed);
    corpus.write(&dir)?;
    println!("wrote {n} images and {} questions to {dir}", corpus.questions.len());
    Ok(())
}
