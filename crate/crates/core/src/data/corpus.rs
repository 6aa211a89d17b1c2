//! On-disk corpus: `vocab.txt`, `manifest.tsv` and `images/*.png`.
//!
//! Manifest lines are `path<TAB>tokens` for labeled samples and a bare path
//! for unlabeled ones. Paths are relative to the corpus directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Image, Sample, Vocabulary};
use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Image::new(h as usize, w as usize, gray.into_raw().into_iter().map(|p| p as f64 / 255.0).collect()))
}

/// Writes samples as a corpus; labeled samples first, then unlabeled.
pub fn write_corpus(dir: &Path, vocab: &Vocabulary, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        save_png(&s.image, &dir.join(&rel))?;
        if s.is_labeled() {
            let _ = writeln!(manifest, "{rel}\t{}", vocab.decode(s.content()));
        } else {
            let _ = writeln!(manifest, "{rel}");
        }
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(io_err(&path))
}

/// Resolves `path` to a manifest file: either the file itself or
/// `path/manifest.tsv`.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Loads every manifest entry. If the corpus ships a `vocab.txt`, it must
/// equal `vocab`.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let own_vocab = root.join(VOCAB_FILE);
    if own_vocab.exists() && &Vocabulary::load(&own_vocab)? != vocab {
        return Err(Error::InvalidInput(format!("vocabulary of corpus {} differs from the model vocabulary", root.display())));
    }
    let text = std::fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: manifest.clone(), line: n + 1, message };
        let (rel, tokens) = match line.split_once('\t') {
            Some((p, t)) => (p, Some(t)),
            None => (line, None),
        };
        let image = load_png(&root.join(rel.trim()))?;
        let sample = match tokens {
            Some(t) => {
                let mut label = vocab.encode(t).map_err(|e| parse_err(e.to_string()))?;
                label.push(vocab.eos());
                Sample::labeled(image, label, vocab)
            }
            None => Sample::unlabeled(image),
        }
        .map_err(|e| parse_err(e.to_string()))?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Vocabulary stored next to a corpus manifest.
pub fn corpus_vocabulary(path: &Path) -> Result<Vocabulary> {
    if !path.exists() {
        return Err(Error::Io { path: path.to_path_buf(), source: std::io::ErrorKind::NotFound.into() });
    }
    let manifest = manifest_path(path);
    Vocabulary::load(&manifest.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_sample, SynthConfig};

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::crohme();
        let cfg = SynthConfig::default();
        let mut samples: Vec<Sample> = (0..4).map(|s| synth_sample(s, &cfg, &v).unwrap()).collect();
        samples.push(Sample::unlabeled(synth_sample(9, &cfg, &v).unwrap().image).unwrap());
        write_corpus(dir.path(), &v, &samples).unwrap();
        let back = load_corpus(dir.path(), &v).unwrap();
        assert_eq!(back, samples);
        assert_eq!(corpus_vocabulary(dir.path()).unwrap(), v);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().filter(|l| !l.contains('\t')).count(), 1);
    }

    #[test]
    fn vocabulary_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::crohme();
        write_corpus(dir.path(), &v, &[synth_sample(0, &SynthConfig::default(), &v).unwrap()]).unwrap();
        let other = Vocabulary::new(&["pad", "sos", "eos", "1"]).unwrap();
        assert!(load_corpus(dir.path(), &other).is_err());
    }

    #[test]
    fn bad_manifest_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::crohme();
        write_corpus(dir.path(), &v, &[synth_sample(0, &SynthConfig::default(), &v).unwrap()]).unwrap();
        std::fs::write(dir.path().join(MANIFEST), "images/000000.png\t1 +\nimages/000000.png\tqqq\n").unwrap();
        match load_corpus(dir.path(), &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
