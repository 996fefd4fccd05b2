use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::corpus::PairRecord;
use super::scene::SceneSpec;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct DumpLine<'a> {
    image_path: String,
    caption: String,
    spec: &'a SceneSpec,
    misaligned: bool,
}

/// Writes each pair as `images/NNNNN.png` plus one line of `pairs.jsonl`.
pub fn dump_pairs(dir: &Path, records: &[PairRecord], image_size: usize) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let index = dir.join("pairs.jsonl");
    let file = File::create(&index).map_err(|e| Error::io(&index, e))?;
    let mut out = BufWriter::new(file);
    let mut pixels = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        pixels.clear();
        r.image.render_into(image_size, &mut pixels);
        write_png(&dir.join(&rel), image_size, &pixels)?;
        let line = DumpLine {
            image_path: rel,
            caption: r.caption_words().join(" "),
            spec: &r.image,
            misaligned: r.misaligned,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&index, e))?;
    }
    out.flush().map_err(|e| Error::io(&index, e))
}

fn write_png(path: &Path, size: usize, pixels: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(&bytes).map_err(io)?;
    w.finish().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_pairs, stream_rng, Stream};

    #[test]
    fn writes_one_png_and_line_per_pair() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_pairs(&mut stream_rng(0, Stream::TrainCorpus), 5, 0.4).unwrap();
        dump_pairs(dir.path(), &records, 16).unwrap();
        let text = fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines.iter().filter(|l| l["misaligned"] == true).count(), 2);
        for l in &lines {
            assert!(dir.path().join(l["image_path"].as_str().unwrap()).is_file());
            assert!(l["spec"]["shape"].is_string());
        }
    }
}
