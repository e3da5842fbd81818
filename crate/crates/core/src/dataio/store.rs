use std::collections::HashSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_class: Option<u32>,
    /// One list of `[x, y]` pixel positions per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixations: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub videos: Vec<VideoEntry>,
}

/// A validated on-disk dataset: `<root>/manifest.json` plus one directory of
/// `frame_NNNNNN.png` files per video.
#[derive(Debug, Clone)]
pub struct VideoStore {
    pub root: PathBuf,
    pub manifest: Manifest,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

pub fn frame_path(root: &Path, id: &str, index: usize) -> PathBuf {
    root.join(id).join(frame_file_name(index))
}

fn count_frame_files(dir: &Path) -> std::io::Result<usize> {
    let mut n = 0;
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".png") {
            n += 1;
        }
    }
    Ok(n)
}

/// Loads and validates a store, reporting every inconsistency found.
pub fn load_store(root: impl AsRef<Path>) -> Result<VideoStore> {
    let root = root.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotFound(format!(
            "dataset manifest {}",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;

    let mut problems = Vec::new();
    if manifest.version != MANIFEST_VERSION {
        problems.push(format!(
            "manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        ));
    }
    let mut ids = HashSet::new();
    for v in &manifest.videos {
        if !ids.insert(v.id.as_str()) {
            problems.push(format!("{}: duplicate video id", v.id));
        }
        if v.width == 0 || v.height == 0 {
            problems.push(format!("{}: zero frame size", v.id));
        }
        let dir = root.join(&v.id);
        match count_frame_files(&dir) {
            Err(_) => problems.push(format!("{}: missing frame directory {}", v.id, dir.display())),
            Ok(n) if n != v.num_frames => problems.push(format!(
                "{}: manifest lists {} frames but directory holds {n}",
                v.id, v.num_frames
            )),
            Ok(_) => {
                if let Some(i) = (0..v.num_frames).find(|&i| !dir.join(frame_file_name(i)).is_file()) {
                    problems.push(format!("{}: missing {}", v.id, frame_file_name(i)));
                }
            }
        }
        if let Some(fix) = &v.fixations {
            if fix.len() != v.num_frames {
                problems.push(format!(
                    "{}: {} fixation lists for {} frames",
                    v.id,
                    fix.len(),
                    v.num_frames
                ));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::CorruptDataset(problems.join("; ")));
    }
    Ok(VideoStore { root, manifest })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let image_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(image_err)?;
    writer.write_image_data(pixels).map_err(image_err)?;
    writer.finish().map_err(image_err)
}

/// Reads an 8-bit grayscale PNG, returning `(width, height, pixels)`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(format!(
            "expected 8-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

/// All frames of one video, held in memory as 8-bit pixels.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub plane_class: Option<u32>,
    pub fixations: Option<Vec<Vec<[f64; 2]>>>,
    pixels: Vec<u8>,
}

impl VideoFrames {
    pub fn new(entry: &VideoEntry, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != entry.num_frames * entry.width * entry.height {
            return Err(Error::CorruptDataset(format!(
                "{}: pixel buffer size does not match {} frames of {}x{}",
                entry.id, entry.num_frames, entry.width, entry.height
            )));
        }
        Ok(Self {
            id: entry.id.clone(),
            width: entry.width,
            height: entry.height,
            num_frames: entry.num_frames,
            plane_class: entry.plane_class,
            fixations: entry.fixations.clone(),
            pixels,
        })
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// In-memory copy of a whole store.
#[derive(Debug, Clone)]
pub struct FrameBank {
    pub videos: Vec<VideoFrames>,
}

impl FrameBank {
    pub fn load(store: &VideoStore) -> Result<Self> {
        use rayon::prelude::*;
        let videos = store
            .manifest
            .videos
            .par_iter()
            .map(|entry| {
                let mut pixels = Vec::with_capacity(entry.num_frames * entry.width * entry.height);
                for i in 0..entry.num_frames {
                    let path = frame_path(&store.root, &entry.id, i);
                    let (w, h, data) = read_gray_png(&path)?;
                    if w != entry.width || h != entry.height {
                        return Err(Error::CorruptDataset(format!(
                            "{}: frame {i} is {w}x{h}, manifest says {}x{}",
                            entry.id, entry.width, entry.height
                        )));
                    }
                    pixels.extend_from_slice(&data);
                }
                VideoFrames::new(entry, pixels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { videos })
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }
}

/// Disjoint train/test partition of video indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out the last `test_fraction` of each class's videos (ordered by id).
/// Videos without a class label form their own group.
pub fn split_videos(bank: &FrameBank, test_fraction: f64) -> Result<Split> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut groups: std::collections::BTreeMap<Option<u32>, Vec<usize>> = Default::default();
    for (i, v) in bank.videos.iter().enumerate() {
        groups.entry(v.plane_class).or_default().push(i);
    }
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut members) in groups {
        members.sort_by(|&a, &b| bank.videos[a].id.cmp(&bank.videos[b].id));
        let n = members.len();
        let mut n_test = (n as f64 * test_fraction).ceil() as usize;
        if n_test >= n {
            n_test = n.saturating_sub(1);
        }
        split.train.extend_from_slice(&members[..n - n_test]);
        split.test.extend_from_slice(&members[n - n_test..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
