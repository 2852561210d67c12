#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};

pub fn jpeg(width: u32, height: u32, shade: u8) -> Vec<u8> {
    let img = RgbImage::from_fn(width, height, |x, y| Rgb([(x * 3) as u8, (y * 4) as u8, shade]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Jpeg).unwrap();
    buf.into_inner()
}

/// One camera's shots for a card: `(burrow, view code, date "YYYY-MM-DD", count, offset seconds)`.
pub struct Shots<'a> {
    pub burrow: &'a str,
    pub view: &'a str,
    pub date: &'a str,
    pub count: usize,
    pub offset_secs: usize,
}

/// Writes an SD card with camera-style file names and its manifest. Returns
/// the card directory; the manifest is `<card>/manifest.csv`.
pub fn make_card(root: &Path, name: &str, shots: &[Shots]) -> PathBuf {
    let card = root.join(name);
    let dcim = card.join("DCIM").join("100MEDIA");
    fs::create_dir_all(&dcim).unwrap();
    let mut manifest = String::from("filename,burrow,view,timestamp\n");
    let mut n = 0;
    for s in shots {
        for i in 0..s.count {
            let file = format!("IMG_{n:05}.JPG");
            fs::write(dcim.join(&file), jpeg(64, 48, (i * 7 % 256) as u8)).unwrap();
            let secs = s.offset_secs + 5 * i;
            manifest.push_str(&format!(
                "{file},{},{},{} {:02}:{:02}:{:02}\n",
                s.burrow,
                s.view,
                s.date,
                7 + secs / 3600,
                secs / 60 % 60,
                secs % 60
            ));
            n += 1;
        }
    }
    fs::write(card.join("manifest.csv"), manifest).unwrap();
    card
}

/// Every regular file under `dir` with its bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect()
}
