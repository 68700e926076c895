use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{DataError, DatasetSplit, LabeledImage, CLASS_NAMES};

pub const MANIFEST: &str = "manifest.tsv";

/// Writes a binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()
}

fn token(r: &mut impl BufRead) -> Result<String, DataError> {
    let mut out = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if out.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !out.is_empty() {
                    break;
                }
            }
            b => out.push(b as char),
        }
    }
    Ok(out)
}

/// Reads a binary 8-bit PGM as `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bad = |m: &str| DataError::Decode { path: path.into(), message: m.into() };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if token(&mut r)? != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let mut num = || -> Result<usize, DataError> { token(&mut r)?.parse().map_err(|_| bad("bad header")) };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
    Ok((w, h, bytes))
}

fn to_bytes(img: &LabeledImage) -> Vec<u8> {
    img.pixels.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes `<id>.pgm`, `<id>_mask.pgm` (when a mask exists) and a manifest
/// listing file, class and split.
pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "file\tclass\tsplit")?;
    for (name, images) in [("train", &split.train), ("test", &split.test)] {
        for img in images {
            let file = format!("{}.pgm", img.source_id);
            write_pgm(&dir.join(&file), img.width, img.height, &to_bytes(img))?;
            if let Some(mask) = &img.mask {
                let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
                write_pgm(&dir.join(format!("{}_mask.pgm", img.source_id)), img.width, img.height, &bytes)?;
            }
            writeln!(manifest, "{file}\t{}\t{name}", CLASS_NAMES[img.label])?;
        }
    }
    manifest.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_neu, split_neu, synth, SynthConfig};

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 3, 2, &[0, 1, 2, 253, 254, 255]).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (3, 2, vec![0, 1, 2, 253, 254, 255]));
        assert_eq!(&std::fs::read(&p).unwrap()[..11], b"P5\n3 2\n255\n");
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let split = synth(&SynthConfig { per_class: 5, size: 20, seed: 4 }).unwrap();
        write_dataset(dir.path(), &split).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 31);
        assert!(manifest.contains("Sc_0004.pgm\tscratches\ttest"));
        let report = load_neu(dir.path(), 20, 20).unwrap();
        assert!(report.failures.is_empty());
        let reloaded = split_neu(report.images).unwrap();
        assert_eq!(reloaded, split);
    }
}
