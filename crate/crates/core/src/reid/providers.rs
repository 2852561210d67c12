//! Embedding and mask providers. Network inference is external; these adapt
//! precomputed files, a subprocess bridge, or deterministic stand-ins.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use image::RgbImage;
use sha2::{Digest, Sha256};

use super::geometry::{ellipse_mask, Mask};
use super::library::{read_embedding_rows, Embedding, EMBEDDING_DIM};
use super::ReidError;
use crate::segmenter::Detection;

/// An image to embed plus a stable key naming it (`{recording}:{frame}:{det}`,
/// with `:rot180` appended for the flipped orientation).
#[derive(Debug, Clone, Copy)]
pub struct EmbedRequest<'a> {
    pub key: &'a str,
    pub image: &'a RgbImage,
}

pub trait EmbeddingProvider: Sync {
    fn embed(&self, request: EmbedRequest<'_>) -> Result<Embedding, ReidError>;
}

/// Hashes the pixel data into a vector in [-1, 1]^32. Equal images map to
/// equal embeddings; anything else is effectively random.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticEmbedder;

impl SyntheticEmbedder {
    pub fn embed_bytes(bytes: &[u8]) -> Embedding {
        let first = Sha256::digest(bytes);
        let second = Sha256::new().chain_update(first).chain_update([1u8]).finalize();
        let mut values = [0.0; EMBEDDING_DIM];
        for (i, v) in values.iter_mut().enumerate() {
            let block = if i < 16 { &first } else { &second };
            let j = (i % 16) * 2;
            let raw = u16::from_be_bytes([block[j], block[j + 1]]);
            *v = raw as f64 / u16::MAX as f64 * 2.0 - 1.0;
        }
        Embedding::new(values).expect("finite by construction")
    }
}

impl EmbeddingProvider for SyntheticEmbedder {
    fn embed(&self, request: EmbedRequest<'_>) -> Result<Embedding, ReidError> {
        let img = request.image;
        let mut bytes = Vec::with_capacity(8 + img.as_raw().len());
        bytes.extend_from_slice(&img.width().to_be_bytes());
        bytes.extend_from_slice(&img.height().to_be_bytes());
        bytes.extend_from_slice(img.as_raw());
        Ok(Self::embed_bytes(&bytes))
    }
}

/// Precomputed embeddings in the library CSV layout, looked up by `image_ref`
/// (the request key). The `individual_id` column is ignored.
#[derive(Debug, Clone, Default)]
pub struct CsvEmbeddings {
    by_key: HashMap<String, Embedding>,
}

impl CsvEmbeddings {
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self, ReidError> {
        let by_key = read_embedding_rows(reader)?
            .into_iter()
            .map(|row| (row.image_ref, row.embedding))
            .collect();
        Ok(CsvEmbeddings { by_key })
    }

    pub fn from_path(path: &Path) -> Result<Self, ReidError> {
        let file = std::fs::File::open(path).map_err(|e| ReidError::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn insert(&mut self, key: impl Into<String>, embedding: Embedding) {
        self.by_key.insert(key.into(), embedding);
    }
}

impl EmbeddingProvider for CsvEmbeddings {
    fn embed(&self, request: EmbedRequest<'_>) -> Result<Embedding, ReidError> {
        self.by_key
            .get(request.key)
            .copied()
            .ok_or_else(|| ReidError::Embedder(format!("no precomputed embedding for {:?}", request.key)))
    }
}

struct EmbedPipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Bridge to an external embedding model: `EMBED <image path>` is answered
/// with `OK e00 ... e31` or `ERR <message>`. Mugshots are written as PNGs to
/// a scratch directory first.
pub struct SubprocessEmbedder {
    pipe: Mutex<Option<EmbedPipe>>,
    spawn_error: Option<String>,
    scratch: PathBuf,
    counter: AtomicU64,
}

impl SubprocessEmbedder {
    pub fn spawn(program: &str, args: &[String], scratch: PathBuf) -> Self {
        let spawned = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn();
        let (pipe, spawn_error) = match spawned {
            Ok(mut child) => {
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                (Some(EmbedPipe { child, stdin, stdout }), None)
            }
            Err(e) => (None, Some(format!("{program}: {e}"))),
        };
        SubprocessEmbedder {
            pipe: Mutex::new(pipe),
            spawn_error,
            scratch,
            counter: AtomicU64::new(0),
        }
    }
}

pub(crate) fn parse_embed_reply(line: &str) -> Result<Embedding, ReidError> {
    let line = line.trim();
    if let Some(msg) = line.strip_prefix("ERR") {
        return Err(ReidError::Embedder(msg.trim().to_string()));
    }
    let body = line
        .strip_prefix("OK")
        .ok_or_else(|| ReidError::Embedder(format!("bad reply {line:?}")))?;
    let values: Vec<f64> = body
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| ReidError::Embedder(format!("bad component {t:?}"))))
        .collect::<Result<_, _>>()?;
    Embedding::from_slice(&values)
}

impl EmbeddingProvider for SubprocessEmbedder {
    fn embed(&self, request: EmbedRequest<'_>) -> Result<Embedding, ReidError> {
        if let Some(e) = &self.spawn_error {
            return Err(ReidError::Embedder(e.clone()));
        }
        std::fs::create_dir_all(&self.scratch).map_err(|e| ReidError::Io(e.to_string()))?;
        let safe: String = request
            .key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let path = self
            .scratch
            .join(format!("{safe}-{}.png", self.counter.fetch_add(1, Ordering::Relaxed)));
        request.image.save(&path).map_err(|e| ReidError::Image(e.to_string()))?;

        let mut guard = self.pipe.lock().expect("embedder lock");
        let pipe = guard
            .as_mut()
            .ok_or_else(|| ReidError::Embedder("embedder not running".into()))?;
        let reply = (|| -> std::io::Result<String> {
            writeln!(pipe.stdin, "EMBED {}", path.display())?;
            pipe.stdin.flush()?;
            let mut line = String::new();
            if pipe.stdout.read_line(&mut line)? == 0 {
                return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "embedder closed its output"));
            }
            Ok(line)
        })();
        let _ = std::fs::remove_file(&path);
        match reply {
            Ok(line) => parse_embed_reply(&line),
            Err(e) => {
                if let Some(mut p) = guard.take() {
                    let _ = p.child.kill();
                    let _ = p.child.wait();
                }
                Err(ReidError::Embedder(format!("protocol failure: {e}")))
            }
        }
    }
}

impl Drop for SubprocessEmbedder {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.pipe.lock() {
            if let Some(p) = guard.take() {
                drop(p.stdin);
                let mut child = p.child;
                let _ = child.wait();
            }
        }
    }
}

/// One detected animal that needs a mask.
#[derive(Debug, Clone, Copy)]
pub struct MaskRequest<'a> {
    pub recording_id: &'a str,
    pub frame_index: usize,
    pub detection_ordinal: usize,
    pub image: &'a RgbImage,
    pub detection: &'a Detection,
}

pub trait MaskProvider: Sync {
    fn mask(&self, request: MaskRequest<'_>) -> Result<Mask, ReidError>;
}

/// Fallback when no segmentation model is available: the ellipse inscribed in
/// the detection box, with the major axis along the longer box side.
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxEllipseMasks;

impl MaskProvider for BoxEllipseMasks {
    fn mask(&self, request: MaskRequest<'_>) -> Result<Mask, ReidError> {
        let (w, h) = request.image.dimensions();
        let b = &request.detection.bbox;
        let (x0, y0) = (b.x.max(0.0), b.y.max(0.0));
        let (x1, y1) = ((b.x + b.w).min(w as f64), (b.y + b.h).min(h as f64));
        if x1 <= x0 || y1 <= y0 {
            return Err(ReidError::MaskOutsideImage {
                mask: (b.w as u32, b.h as u32),
                image: (w, h),
            });
        }
        let (bw, bh) = (x1 - x0, y1 - y0);
        let (major, minor, tilt) = if bh >= bw { (bh / 2.0, bw / 2.0, 0.0) } else { (bw / 2.0, bh / 2.0, 90.0) };
        let local = ellipse_mask(bw.ceil() as u32, bh.ceil() as u32, major, minor, tilt);
        let (ox, oy) = (x0.floor() as u32, y0.floor() as u32);
        Ok(Mask::from_fn(w, h, |x, y| {
            x >= ox && y >= oy && local.get(x - ox, y - oy)
        }))
    }
}

/// Masks produced offline by a segmentation model, stored as grayscale PNGs
/// named `{recording}-{frame:06}-{detection}.png` (nonzero = animal).
#[derive(Debug, Clone)]
pub struct PngMasks {
    pub dir: PathBuf,
}

impl PngMasks {
    pub fn file_name(recording_id: &str, frame_index: usize, detection: usize) -> String {
        format!("{recording_id}-{frame_index:06}-{detection}.png")
    }
}

impl MaskProvider for PngMasks {
    fn mask(&self, request: MaskRequest<'_>) -> Result<Mask, ReidError> {
        let path = self
            .dir
            .join(Self::file_name(request.recording_id, request.frame_index, request.detection_ordinal));
        let img = image::open(&path)
            .map_err(|e| ReidError::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        Ok(Mask::from_luma(&img, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::BBox;

    #[test]
    fn synthetic_embedder_is_deterministic() {
        let a = RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 4]));
        let e = SyntheticEmbedder;
        let req = |img| EmbedRequest { key: "k", image: img };
        assert_eq!(e.embed(req(&a)).unwrap(), e.embed(req(&a)).unwrap());
        assert_ne!(e.embed(req(&a)).unwrap(), e.embed(req(&b)).unwrap());
        assert!(e.embed(req(&a)).unwrap().as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn embed_reply_parsing() {
        let ok = format!("OK {}", vec!["0.5"; 32].join(" "));
        assert_eq!(parse_embed_reply(&ok).unwrap().as_slice()[31], 0.5);
        assert!(matches!(parse_embed_reply("ERR no model"), Err(ReidError::Embedder(m)) if m == "no model"));
        assert!(matches!(parse_embed_reply("OK 1 2 3"), Err(ReidError::Dimension(3))));
    }

    #[test]
    fn csv_embeddings_lookup() {
        let mut text = String::from("individual_id,image_ref");
        for i in 0..32 {
            text.push_str(&format!(",e{i:02}"));
        }
        text.push_str("\n,B07-O-20210314:3:0");
        for _ in 0..32 {
            text.push_str(",0.25");
        }
        text.push('\n');
        let p = CsvEmbeddings::from_reader(text.as_bytes()).unwrap();
        let img = RgbImage::new(1, 1);
        assert!(p.embed(EmbedRequest { key: "B07-O-20210314:3:0", image: &img }).is_ok());
        assert!(p.embed(EmbedRequest { key: "missing", image: &img }).is_err());
    }

    #[test]
    fn box_ellipse_mask_follows_box_shape() {
        let img = RgbImage::new(200, 100);
        let det = Detection {
            frame_index: 0,
            bbox: BBox { x: 20.0, y: 30.0, w: 120.0, h: 40.0 },
            confidence: 0.95,
            label: "tortoise".into(),
        };
        let m = BoxEllipseMasks
            .mask(MaskRequest {
                recording_id: "r",
                frame_index: 0,
                detection_ordinal: 0,
                image: &img,
                detection: &det,
            })
            .unwrap();
        let (x0, y0, x1, y1) = m.bounding_box().unwrap();
        assert!(x0 >= 20 && x1 < 140 && y0 >= 30 && y1 < 70);
        assert_eq!(super::super::geometry::mask_orientation(&m).unwrap(), 90.0);
    }
}
