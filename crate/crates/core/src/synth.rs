//! Seeded synthetic scenes and programmatic corruptions with known labels,
//! used for smoke runs, benchmarks and overfit checks.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::datamodel::{
    annotations_to_json, Channels, Flaw, FlawLabelSet, ImageRecord, QuestionEntry, SourceTask, VisualQuestion,
    WorkerAnnotation, UNRECOGNIZABLE_CAPTION,
};
use crate::error::{Error, Result};

/// A mid-exposure scene of random rectangles, discs and stripes on a
/// gradient background.
pub fn scene(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(70.0..150.0));
    let tilt: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-40.0..40.0));
    let mut img = RgbImage::from_fn(size, size, |x, y| {
        let t = (x + y) as f32 / (2 * size) as f32;
        Rgb(std::array::from_fn(|c| (base[c] + tilt[c] * t) as u8))
    });
    let s = size as i64;
    for _ in 0..rng.gen_range(5..9) {
        let color: [u8; 3] = std::array::from_fn(|_| rng.gen_range(30..226));
        let (cx, cy) = (rng.gen_range(0..s), rng.gen_range(0..s));
        let r = rng.gen_range(s / 10..s / 3).max(2);
        match rng.gen_range(0..3) {
            0 => paint(&mut img, |x, y| (x - cx).abs() < r && (y - cy).abs() < r / 2 + 1, color),
            1 => paint(&mut img, |x, y| (x - cx).pow(2) + (y - cy).pow(2) < r * r, color),
            _ => {
                let period = rng.gen_range(3..7);
                paint(&mut img, |x, y| (x - cx).abs() < r && (y - cy).abs() < r && (x / period) % 2 == 0, color)
            }
        }
    }
    img
}

fn paint(img: &mut RgbImage, inside: impl Fn(i64, i64) -> bool, color: [u8; 3]) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        if inside(x as i64, y as i64) {
            *p = Rgb(color);
        }
    }
}

pub fn blur(img: &RgbImage, sigma: f32) -> RgbImage {
    image::imageops::blur(img, sigma)
}

/// Pushes values towards white: `v * gain + lift`, clipped.
pub fn overexpose(img: &RgbImage) -> RgbImage {
    map_pixels(img, |v| v * 1.6 + 110.0)
}

/// Crushes values towards black.
pub fn underexpose(img: &RgbImage) -> RgbImage {
    map_pixels(img, |v| v * 0.18)
}

fn map_pixels(img: &RgbImage, f: impl Fn(f32) -> f32) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = f(*c as f32).clamp(0.0, 255.0) as u8;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub image_id: String,
    pub image: RgbImage,
    pub flaws: Channels<bool>,
    pub unrecognizable: bool,
}

/// `n_sharp` clean scenes and `n_blur` heavily blurred ones (labelled
/// unrecognizable), interleaved.
pub fn blur_set(n_sharp: usize, n_blur: usize, size: u32, seed: u64) -> Vec<SyntheticImage> {
    let mut out = Vec::with_capacity(n_sharp + n_blur);
    for i in 0..n_sharp + n_blur {
        let img = scene(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size);
        let paired = 2 * n_sharp.min(n_blur);
        let blurred = if i < paired { i % 2 == 1 } else { n_blur > n_sharp };
        let mut flaws = Channels([false; 8]);
        if blurred {
            flaws[Flaw::Blur] = true;
        } else {
            flaws[Flaw::NoFlaw] = true;
        }
        out.push(SyntheticImage {
            image_id: format!("synth-{seed}-{i:04}"),
            image: if blurred { blur(&img, size as f32 / 12.0) } else { img },
            flaws,
            unrecognizable: blurred,
        });
    }
    out
}

/// Scenes with injected blur (independent) and exposure (normal, bright or
/// dark); every one of the six combinations appears equally often.
pub fn flaw_set(n: usize, size: u32, seed: u64) -> Vec<SyntheticImage> {
    let mut combos: Vec<usize> = (0..n).map(|i| i % 6).collect();
    combos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    combos
        .into_iter()
        .enumerate()
        .map(|(i, combo)| {
            let mut img = scene(seed.wrapping_mul(7_919).wrapping_add(i as u64), size);
            let mut flaws = Channels([false; 8]);
            if combo % 2 == 1 {
                img = blur(&img, size as f32 / 16.0);
                flaws[Flaw::Blur] = true;
            }
            match combo / 2 {
                1 => {
                    img = overexpose(&img);
                    flaws[Flaw::Bright] = true;
                }
                2 => {
                    img = underexpose(&img);
                    flaws[Flaw::Dark] = true;
                }
                _ => {}
            }
            if !flaws.0.iter().any(|&b| b) {
                flaws[Flaw::NoFlaw] = true;
            }
            SyntheticImage {
                image_id: format!("flaw-{seed}-{i:04}"),
                image: img,
                flaws,
                unrecognizable: false,
            }
        })
        .collect()
}

const ANSWERABLE_QUESTIONS: [&str; 6] = [
    "What color is this shirt?",
    "What is in this can?",
    "What does this label say?",
    "Which flavor is this box?",
    "What kind of soup is this?",
    "Is this the remote control?",
];

const INSUFFICIENT_QUESTIONS: [&str; 6] = [
    "What is the expiration date on the back?",
    "What does the other side of the box say?",
    "How many calories are listed on the back?",
    "What is written on the other side?",
    "What are the cooking directions on the back?",
    "Who is the letter on the other side from?",
];

/// Visual questions with rule-generated labels: a blurred image makes the
/// question unanswerable for lack of recognizability; on a sharp image,
/// questions about an unseen side are unanswerable for lack of content.
/// Classes are balanced in thirds.
pub fn reason_set(n: usize, size: u32, seed: u64) -> Vec<(VisualQuestion, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let img = scene(seed.wrapping_mul(104_729).wrapping_add(i as u64), size);
            let id = format!("vq-{seed}-{i:04}");
            let (question, answerable, unrec, img) = match i % 3 {
                0 => {
                    let pool = if rng.gen_bool(0.5) { &ANSWERABLE_QUESTIONS } else { &INSUFFICIENT_QUESTIONS };
                    (*pool.choose(&mut rng).unwrap(), false, true, blur(&img, size as f32 / 12.0))
                }
                1 => (*ANSWERABLE_QUESTIONS.choose(&mut rng).unwrap(), true, false, img),
                _ => (*INSUFFICIENT_QUESTIONS.choose(&mut rng).unwrap(), false, false, img),
            };
            (VisualQuestion::new(id, question, answerable, unrec), img)
        })
        .collect()
}

/// A crowd-annotated corpus: images, five noisy worker annotations per image
/// and, for the VQA half, questions with answerability labels.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<ImageRecord>,
    pub questions: Vec<QuestionEntry>,
    pub images: Vec<(String, RgbImage)>,
}

/// Seeded corpus of `n` images. Each image gets a latent condition (clean,
/// heavy blur, bright, dark or badly framed); workers report it with
/// per-vote noise, so quorum labels mostly but not always match.
pub fn annotated_corpus(n: usize, size: u32, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_4b05);
    let mut out = Corpus {
        records: Vec::with_capacity(n),
        questions: Vec::new(),
        images: Vec::with_capacity(n),
    };
    for i in 0..n {
        let id = format!("img_{i:05}");
        let mut img = scene(seed.wrapping_mul(31_337).wrapping_add(i as u64), size);
        let condition = i % 5;
        let mut latent = Vec::new();
        match condition {
            1 => {
                img = blur(&img, size as f32 / 12.0);
                latent.push(Flaw::Blur);
            }
            2 => {
                img = overexpose(&img);
                latent.push(Flaw::Bright);
            }
            3 => {
                img = underexpose(&img);
                latent.push(Flaw::Dark);
            }
            4 => latent.push(Flaw::Framing),
            _ => {}
        }
        let p_unrec = if condition == 1 { 0.75 } else { 0.06 };
        let annotations = (0..5)
            .map(|w| {
                let unrec = rng.gen_bool(p_unrec);
                let mut flaws: Vec<Flaw> = Flaw::ALL[..Flaw::COUNT - 1]
                    .iter()
                    .copied()
                    .filter(|f| rng.gen_bool(if latent.contains(f) { 0.8 } else { 0.05 }))
                    .collect();
                if flaws.is_empty() {
                    flaws.push(Flaw::NoFlaw);
                }
                WorkerAnnotation {
                    worker_id: format!("w{:02}", (i * 5 + w) % 37),
                    caption: if unrec {
                        UNRECOGNIZABLE_CAPTION.to_string()
                    } else {
                        format!("A photo of object number {}.", i % 11)
                    },
                    unrecognizable: unrec,
                    flaws: FlawLabelSet::from_flaws(&flaws),
                }
            })
            .collect();
        let vqa = i % 2 == 1;
        let question = vqa.then(|| {
            let back = rng.gen_bool(0.3);
            let pool = if back { &INSUFFICIENT_QUESTIONS } else { &ANSWERABLE_QUESTIONS };
            let q = pool.choose(&mut rng).unwrap().to_string();
            out.questions.push(QuestionEntry {
                image_id: id.clone(),
                question: q.clone(),
                answerable: !back && condition != 1,
            });
            q
        });
        out.records.push(ImageRecord {
            image_id: id.clone(),
            uri: format!("images/{id}.png"),
            source_task: if vqa { SourceTask::Vqa } else { SourceTask::Captioning },
            question,
            annotations,
        });
        out.images.push((id, img));
    }
    out
}

impl Corpus {
    /// Writes `annotations.json`, `questions.json` and `images/*.png` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (id, img) in &self.images {
            let path = images.join(format!("{id}.png"));
            img.save(&path).map_err(|e| Error::Decode {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        }
        let ann = dir.join("annotations.json");
        std::fs::write(&ann, annotations_to_json(&self.records)? + "\n").map_err(|e| Error::io(&ann, e))?;
        let q = dir.join("questions.json");
        std::fs::write(&q, serde_json::to_string_pretty(&self.questions)? + "\n").map_err(|e| Error::io(&q, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ReasonClass;

    #[test]
    fn sets_are_deterministic_and_balanced() {
        let a = blur_set(16, 16, 48, 1);
        let b = blur_set(16, 16, 48, 1);
        assert_eq!(a.len(), 32);
        assert_eq!(a.iter().filter(|s| s.unrecognizable).count(), 16);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image));

        let f = flaw_set(48, 32, 2);
        for flaw in [Flaw::Blur, Flaw::Bright, Flaw::Dark] {
            assert_eq!(f.iter().filter(|s| s.flaws[flaw]).count(), if flaw == Flaw::Blur { 24 } else { 16 });
        }
        assert_eq!(f.iter().filter(|s| s.flaws[Flaw::NoFlaw]).count(), 8);

        let r = reason_set(48, 32, 3);
        for class in ReasonClass::ALL {
            assert_eq!(r.iter().filter(|(q, _)| q.reason_class == class).count(), 16);
        }
    }

    #[test]
    fn corruptions_move_brightness() {
        let img = scene(4, 32);
        let mean = |i: &RgbImage| i.pixels().map(|p| p.0.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / (3.0 * 1024.0);
        assert!(mean(&overexpose(&img)) > mean(&img) + 60.0);
        assert!(mean(&underexpose(&img)) < mean(&img) / 3.0);
    }

    #[test]
    fn corpus_validates_and_round_trips() {
        let c = annotated_corpus(20, 32, 5);
        assert_eq!(c.records.len(), 20);
        assert_eq!(c.questions.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let parsed = crate::datamodel::parse_annotation_file(dir.path().join("annotations.json")).unwrap();
        assert_eq!(parsed, c.records);
        let agg = crate::datamodel::aggregate_all(&parsed, 2).unwrap();
        assert!(agg.iter().any(|a| a.unrecognizable));
        assert!(agg.iter().any(|a| !a.unrecognizable));
        assert!(dir.path().join("images/img_00019.png").exists());
    }
}
