//! Clean-frame sources: image directories, RVPT archives, and the
//! synthetic-motion generator.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::dataio::motion::{procedural_still, MotionConfig, MotionStream, StillKind};
use crate::dataio::pnm::read_pnm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStream {
    pub still: StillKind,
    /// Side of the square still the window moves over.
    pub still_size: usize,
    pub channels: usize,
    pub crop: usize,
    pub motion: MotionConfig,
    pub seed: u64,
    /// `None` streams forever.
    pub length: Option<usize>,
}

impl SyntheticStream {
    pub fn new(crop: usize, channels: usize, seed: u64) -> Self {
        Self {
            still: StillKind::Blobs,
            still_size: crop * 3,
            channels,
            crop,
            motion: MotionConfig::default(),
            seed,
            length: None,
        }
    }

    pub fn with_length(mut self, length: usize) -> Self {
        self.length = Some(length);
        self
    }

    pub fn stream(&self) -> Result<MotionStream> {
        let still = procedural_still(
            self.still,
            self.still_size,
            self.still_size,
            self.channels,
            self.seed,
        );
        MotionStream::new(still, self.crop, self.motion, self.seed.wrapping_add(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceSource {
    /// PGM/PPM files, taken in lexicographic filename order.
    Directory(PathBuf),
    /// RVPT archive of `[h, w, c]` frames, or one `[t, h, w, c]` tensor.
    Archive(PathBuf),
    Synthetic(SyntheticStream),
}

pub struct Frames {
    inner: Inner,
    index: usize,
    shape: Option<Vec<usize>>,
    failed: bool,
}

enum Inner {
    Files(Vec<PathBuf>),
    Tensors(PathBuf, Vec<Tensor>),
    Stream(MotionStream, Option<usize>),
}

impl Frames {
    /// Number of frames, `None` for endless generators.
    pub fn frame_count(&self) -> Option<usize> {
        match &self.inner {
            Inner::Files(f) => Some(f.len()),
            Inner::Tensors(_, t) => Some(t.len()),
            Inner::Stream(_, n) => *n,
        }
    }

    fn check(&mut self, f: Tensor, path: &Path) -> Result<Tensor> {
        match &self.shape {
            Some(s) if s.as_slice() != f.shape() => Err(Error::Data {
                path: path.to_path_buf(),
                msg: format!(
                    "frame {} has shape {:?} but earlier frames are {:?}",
                    self.index,
                    f.shape(),
                    s
                ),
            }),
            Some(_) => Ok(f),
            None => {
                self.shape = Some(f.shape().to_vec());
                Ok(f)
            }
        }
    }
}

impl Iterator for Frames {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Result<Tensor>> {
        if self.failed {
            return None;
        }
        let i = self.index;
        let item = match &mut self.inner {
            Inner::Files(files) => {
                let path = files.get(i)?.clone();
                read_pnm(&path)
                    .map_err(|e| match e {
                        Error::Data { path, msg } => Error::Data {
                            path,
                            msg: format!("frame {i}: {msg}"),
                        },
                        e => e,
                    })
                    .and_then(|f| self.check(f, &path))
            }
            Inner::Tensors(path, frames) => {
                let f = frames.get(i)?.clone();
                let path = path.clone();
                self.check(f, &path)
            }
            Inner::Stream(s, n) => {
                if n.is_some_and(|n| i >= n) {
                    return None;
                }
                Ok(s.next().expect("endless"))
            }
        };
        self.failed = item.is_err();
        self.index += 1;
        Some(item)
    }
}

fn is_pnm(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
}

/// Opens a source. Directory frames are decoded lazily as they are pulled.
pub fn load_sequence(source: &SequenceSource) -> Result<Frames> {
    let inner = match source {
        SequenceSource::Directory(dir) => {
            let entries = fs::read_dir(dir).map_err(|e| Error::Data {
                path: dir.clone(),
                msg: format!("cannot list directory: {e}"),
            })?;
            let mut files = Vec::new();
            for e in entries {
                let p = e?.path();
                if p.is_file() && is_pnm(&p) {
                    files.push(p);
                }
            }
            files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
            if files.is_empty() {
                return Err(Error::Data {
                    path: dir.clone(),
                    msg: "no .pgm/.ppm frames found".into(),
                });
            }
            Inner::Files(files)
        }
        SequenceSource::Archive(path) => {
            let ar = Archive::load(path)?;
            let mut frames = Vec::new();
            for (name, t) in &ar.entries {
                match t.rank() {
                    3 => frames.push(t.clone()),
                    4 => {
                        let s = t.shape();
                        let per = s[1] * s[2] * s[3];
                        for chunk in t.data().chunks(per.max(1)) {
                            frames.push(Tensor::new(s[1..].to_vec(), chunk.to_vec())?);
                        }
                    }
                    r => {
                        return Err(Error::Data {
                            path: path.clone(),
                            msg: format!(
                            "entry `{name}` has rank {r}; frames must be rank 3 or a rank-4 stack"
                        ),
                        })
                    }
                }
            }
            Inner::Tensors(path.clone(), frames)
        }
        SequenceSource::Synthetic(s) => Inner::Stream(s.stream()?, s.length),
    };
    Ok(Frames {
        inner,
        index: 0,
        shape: None,
        failed: false,
    })
}

/// Pulls a whole finite source into memory.
pub fn collect_frames(source: &SequenceSource, limit: Option<usize>) -> Result<Vec<Tensor>> {
    let frames = load_sequence(source)?;
    if frames.frame_count().is_none() && limit.is_none() {
        return Err(Error::config(
            "an endless synthetic stream needs a frame limit",
        ));
    }
    frames.take(limit.unwrap_or(usize::MAX)).collect()
}

/// Stores frames as `frame.000000`, `frame.000001`, ...
pub fn save_sequence_archive(path: &Path, frames: &[Tensor]) -> Result<()> {
    let mut ar = Archive::new();
    for (i, f) in frames.iter().enumerate() {
        ar.push(format!("frame.{i:06}"), f.clone());
    }
    ar.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::pnm::write_pnm;

    #[test]
    fn directory_is_read_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.pgm", 2.0), ("a.pgm", 1.0), ("c.pgm", 3.0)] {
            write_pnm(&dir.path().join(name), &Tensor::full(&[4, 5, 1], v / 255.0)).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let src = SequenceSource::Directory(dir.path().to_path_buf());
        let frames = collect_frames(&src, None).unwrap();
        let firsts: Vec<f32> = frames.iter().map(|f| f.data()[0] * 255.0).collect();
        assert_eq!(firsts, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn mixed_sizes_name_the_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        write_pnm(&dir.path().join("f0.pgm"), &Tensor::zeros(&[4, 4, 1])).unwrap();
        write_pnm(&dir.path().join("f1.pgm"), &Tensor::zeros(&[4, 6, 1])).unwrap();
        let err = collect_frames(&SequenceSource::Directory(dir.path().into()), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f1.pgm") && msg.contains("frame 1"), "{msg}");
    }

    #[test]
    fn archive_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rvpt");
        let frames: Vec<Tensor> = (0..4)
            .map(|t| Tensor::from_fn(&[3, 3, 2], |i| (t * 18 + i) as f32 * 0.1234567))
            .collect();
        save_sequence_archive(&path, &frames).unwrap();
        assert_eq!(
            collect_frames(&SequenceSource::Archive(path), None).unwrap(),
            frames
        );
    }

    #[test]
    fn synthetic_stream_needs_a_limit_and_restarts() {
        let src = SequenceSource::Synthetic(SyntheticStream::new(16, 1, 3));
        assert!(collect_frames(&src, None).is_err());
        let a = collect_frames(&src, Some(30)).unwrap();
        assert_eq!(a, collect_frames(&src, Some(30)).unwrap());
        assert_eq!(a.len(), 30);
    }
}
