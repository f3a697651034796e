//! File formats.
//!
//! Pointmaps (`*.pmap`) are binary: three little-endian `u64` values
//! `(H, W, frame_index)` followed by `H * W * 3` little-endian `f64`, rows
//! top to bottom, pixels left to right, `x y z` per pixel. Depth images
//! (`*.depth`) use the same header followed by `H * W` `f64`.
//!
//! Tracks are CSV. The first line is `N,T`, the second the column header
//! `i,t,x,y,z,visibility,px,py`, then one row per `(i, t)` in track-major
//! order. Pseudo 2D tracks use the same layout with `x`, `y`, `z` written as
//! `NaN`. Poses are CSV with header `t,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz`
//! (camera-to-world). Static masks are CSV: `N,T`, then one line of `T`
//! zeros and ones per track.
//!
//! Floats are written in shortest round-trip form, so every text file reads
//! back bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{PixelLocation, PointMapGrid};
use crate::metrics::depth::DepthImage;
use crate::pose::{relative_pose, Pose};
use crate::synth::{Estimates, PseudoTracks, SceneConfig, SyntheticScene};
use crate::tracks::{TrackSet, WorldTrackSet};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{}: {msg}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },
}

impl IoError {
    fn format(path: &Path, line: Option<usize>, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            IoError::Io { path, .. } | IoError::Format { path, .. } => path,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), IoError> {
    let wrap = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(wrap)?;
    }
    fs::write(path, contents).map_err(wrap)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::format(path, None, e.to_string()))?;
    s.push('\n');
    write_file(path, s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::format(path, Some(e.line()), e.to_string()))
}

const HEADER_BYTES: usize = 24;

fn encode_raster(h: usize, w: usize, frame: usize, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + h * w * 24);
    for v in [h, w, frame] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns `(height, width, frame, values)`.
fn decode_raster(path: &Path, bytes: &[u8], channels: usize) -> Result<(usize, usize, usize, Vec<f64>), IoError> {
    if bytes.len() < HEADER_BYTES {
        return Err(IoError::format(path, None, format!("file is {} bytes, shorter than the 24-byte header", bytes.len())));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().expect("8 bytes"));
    let (h, w, frame) = (word(0), word(1), word(2));
    if h == 0 || w == 0 {
        return Err(IoError::format(path, None, format!("empty raster {h}x{w}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8 * channels as u64))
        .and_then(|n| n.checked_add(HEADER_BYTES as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(IoError::format(
            path,
            None,
            format!("header says {h}x{w}x{channels} but payload is {} bytes", bytes.len() - HEADER_BYTES),
        ));
    }
    let values = bytes[HEADER_BYTES..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((h as usize, w as usize, frame as usize, values))
}

pub fn encode_pointmap(grid: &PointMapGrid) -> Vec<u8> {
    encode_raster(
        grid.height(),
        grid.width(),
        grid.frame_index(),
        grid.points().iter().flat_map(|p| [p.x, p.y, p.z]),
    )
}

pub fn write_pointmap(path: &Path, grid: &PointMapGrid) -> Result<(), IoError> {
    write_file(path, encode_pointmap(grid))
}

pub fn read_pointmap(path: &Path) -> Result<PointMapGrid, IoError> {
    let (h, w, frame, v) = decode_raster(path, &read_bytes(path)?, 3)?;
    let points = v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    Ok(PointMapGrid::new(w, h, frame, points))
}

pub fn write_depth(path: &Path, frame: usize, depth: &DepthImage) -> Result<(), IoError> {
    write_file(path, encode_raster(depth.height, depth.width, frame, depth.data.iter().copied()))
}

/// Returns `(frame_index, image)`.
pub fn read_depth(path: &Path) -> Result<(usize, DepthImage), IoError> {
    let (height, width, frame, data) = decode_raster(path, &read_bytes(path)?, 1)?;
    Ok((frame, DepthImage { width, height, data }))
}

/// Camera-frame depth (the `z` channel) of a pointmap.
pub fn depth_of(grid: &PointMapGrid) -> DepthImage {
    DepthImage {
        width: grid.width(),
        height: grid.height(),
        data: grid.points().iter().map(|p| p.z).collect(),
    }
}

/// Line-oriented CSV reader that reports 1-based line numbers.
struct Csv<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Csv<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            lines: text.lines().enumerate(),
        }
    }

    fn next_fields(&mut self, what: &str) -> Result<(usize, Vec<&'a str>), IoError> {
        loop {
            match self.lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((k, l)) => return Ok((k + 1, l.split(',').map(str::trim).collect())),
                None => return Err(IoError::format(self.path, None, format!("unexpected end of file, expected {what}"))),
            }
        }
    }

    fn expect_end(&mut self) -> Result<(), IoError> {
        for (k, l) in self.lines.by_ref() {
            if !l.trim().is_empty() {
                return Err(IoError::format(self.path, Some(k + 1), "unexpected trailing row"));
            }
        }
        Ok(())
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> IoError {
        IoError::format(self.path, Some(line), msg)
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, field: &str, what: &str) -> Result<T, IoError> {
        field.parse().map_err(|_| self.err(line, format!("cannot parse {what} from {field:?}")))
    }

    fn expect_len(&self, line: usize, fields: &[&str], n: usize) -> Result<(), IoError> {
        if fields.len() != n {
            return Err(self.err(line, format!("expected {n} columns, found {}", fields.len())));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<(usize, usize), IoError> {
        let (line, f) = self.next_fields("the N,T header")?;
        self.expect_len(line, &f, 2)?;
        Ok((self.parse(line, f[0], "N")?, self.parse(line, f[1], "T")?))
    }

    fn header(&mut self, expected: &str) -> Result<(), IoError> {
        let (line, f) = self.next_fields("the column header")?;
        if f.join(",") != expected {
            return Err(self.err(line, format!("expected column header {expected:?}")));
        }
        Ok(())
    }
}

pub const TRACK_COLUMNS: &str = "i,t,x,y,z,visibility,px,py";

/// One `(i, t)` row of a track file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRow {
    pub point: Vector3<f64>,
    pub visibility: f64,
    pub pixel: PixelLocation,
}

pub fn encode_track_rows(n_tracks: usize, n_frames: usize, rows: impl Iterator<Item = TrackRow>) -> String {
    let mut s = format!("{n_tracks},{n_frames}\n{TRACK_COLUMNS}\n");
    for (k, r) in rows.enumerate() {
        let (i, t) = (k / n_frames.max(1), k % n_frames.max(1));
        let _ = writeln!(
            s,
            "{i},{t},{},{},{},{},{},{}",
            r.point.x, r.point.y, r.point.z, r.visibility, r.pixel.x, r.pixel.y
        );
    }
    s
}

/// Parses a track file into `(N, T, rows)` with rows in track-major order.
pub fn decode_track_rows(path: &Path, text: &str) -> Result<(usize, usize, Vec<TrackRow>), IoError> {
    let mut csv = Csv::new(path, text);
    let (n, t_n) = csv.dims()?;
    csv.header(TRACK_COLUMNS)?;
    let mut rows = Vec::with_capacity(n * t_n);
    for k in 0..n * t_n {
        let (line, f) = csv.next_fields("a track row")?;
        csv.expect_len(line, &f, 8)?;
        let i: usize = csv.parse(line, f[0], "track index")?;
        let t: usize = csv.parse(line, f[1], "frame index")?;
        if (i, t) != (k / t_n, k % t_n) {
            return Err(csv.err(line, format!("expected row for (i, t) = ({}, {}), found ({i}, {t})", k / t_n, k % t_n)));
        }
        let mut v = [0.0; 6];
        for (j, name) in ["x", "y", "z", "visibility", "px", "py"].iter().enumerate() {
            v[j] = csv.parse(line, f[2 + j], name)?;
        }
        if !(0.0..=1.0).contains(&v[3]) {
            return Err(csv.err(line, format!("visibility {} outside [0, 1]", v[3])));
        }
        rows.push(TrackRow {
            point: Vector3::new(v[0], v[1], v[2]),
            visibility: v[3],
            pixel: PixelLocation::new(v[4], v[5]),
        });
    }
    csv.expect_end()?;
    Ok((n, t_n, rows))
}

pub fn encode_tracks(tracks: &TrackSet) -> String {
    encode_track_rows(
        tracks.n_tracks,
        tracks.n_frames,
        (0..tracks.points.len()).map(|k| TrackRow {
            point: tracks.points[k],
            visibility: tracks.visibility[k],
            pixel: tracks.query_pixels[k],
        }),
    )
}

pub fn write_tracks(path: &Path, tracks: &TrackSet) -> Result<(), IoError> {
    write_file(path, encode_tracks(tracks))
}

/// Reads a track file. The static mask is not part of the format and
/// defaults to all-static.
pub fn read_tracks(path: &Path) -> Result<TrackSet, IoError> {
    let (n, t_n, rows) = decode_track_rows(path, &read_text(path)?)?;
    let mut tracks = TrackSet::new(n, t_n);
    for (k, r) in rows.into_iter().enumerate() {
        tracks.points[k] = r.point;
        tracks.visibility[k] = r.visibility;
        tracks.query_pixels[k] = r.pixel;
    }
    Ok(tracks)
}

pub fn write_pseudo_tracks(path: &Path, pseudo: &PseudoTracks) -> Result<(), IoError> {
    let nan = Vector3::repeat(f64::NAN);
    let rows = (0..pseudo.pixels.len()).map(|k| TrackRow {
        point: nan,
        visibility: pseudo.visibility[k],
        pixel: pseudo.pixels[k],
    });
    write_file(path, encode_track_rows(pseudo.n_tracks, pseudo.n_frames, rows))
}

pub fn read_pseudo_tracks(path: &Path) -> Result<PseudoTracks, IoError> {
    let (n_tracks, n_frames, rows) = decode_track_rows(path, &read_text(path)?)?;
    Ok(PseudoTracks {
        n_tracks,
        n_frames,
        pixels: rows.iter().map(|r| r.pixel).collect(),
        visibility: rows.iter().map(|r| r.visibility).collect(),
    })
}

/// World tracks share the track layout; visibility is written as 1 and
/// pixels as `NaN`.
pub fn write_world_tracks(path: &Path, world: &WorldTrackSet) -> Result<(), IoError> {
    let nan = PixelLocation::new(f64::NAN, f64::NAN);
    let rows = world.points.iter().map(|&point| TrackRow {
        point,
        visibility: 1.0,
        pixel: nan,
    });
    write_file(path, encode_track_rows(world.n_tracks, world.n_frames, rows))
}

pub fn read_world_tracks(path: &Path) -> Result<WorldTrackSet, IoError> {
    let (n_tracks, n_frames, rows) = decode_track_rows(path, &read_text(path)?)?;
    Ok(WorldTrackSet {
        n_tracks,
        n_frames,
        points: rows.iter().map(|r| r.point).collect(),
    })
}

pub const POSE_COLUMNS: &str = "t,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz";

pub fn encode_poses(poses: &[Pose]) -> String {
    let mut s = format!("{POSE_COLUMNS}\n");
    for (t, p) in poses.iter().enumerate() {
        let r = p.rotation();
        let x = p.translation();
        let _ = write!(s, "{t}");
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(s, ",{}", r[(i, j)]);
            }
        }
        let _ = writeln!(s, ",{},{},{}", x.x, x.y, x.z);
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    write_file(path, encode_poses(poses))
}

/// Reads camera-to-world poses. Rotations are taken as written (no
/// re-orthonormalization) so a written file round-trips exactly; rows whose
/// rotation is not orthonormal to 1e-6 are rejected.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    let text = read_text(path)?;
    let mut csv = Csv::new(path, &text);
    csv.header(POSE_COLUMNS)?;
    let mut poses = Vec::new();
    while let Ok((line, f)) = csv.next_fields("a pose row") {
        csv.expect_len(line, &f, 13)?;
        let t: usize = csv.parse(line, f[0], "frame index")?;
        if t != poses.len() {
            return Err(csv.err(line, format!("expected frame {}, found {t}", poses.len())));
        }
        let mut v = [0.0; 12];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = csv.parse(line, f[1 + j], "pose entry")?;
        }
        let r = Matrix3::from_row_slice(&v[..9]);
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(ortho < 1e-6) || !(r.determinant() > 0.0) {
            return Err(csv.err(line, "rotation is not a proper orthonormal matrix"));
        }
        poses.push(Pose::from_parts_unchecked(r, Vector3::new(v[9], v[10], v[11])));
    }
    Ok(poses)
}

pub fn encode_static_mask(n_tracks: usize, n_frames: usize, mask: &[bool]) -> String {
    let mut s = format!("{n_tracks},{n_frames}\n");
    for i in 0..n_tracks {
        let row: Vec<&str> = mask[i * n_frames..(i + 1) * n_frames]
            .iter()
            .map(|&m| if m { "1" } else { "0" })
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_static_mask(path: &Path, n_tracks: usize, n_frames: usize, mask: &[bool]) -> Result<(), IoError> {
    write_file(path, encode_static_mask(n_tracks, n_frames, mask))
}

/// Returns `(N, T, mask)` in track-major order.
pub fn read_static_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), IoError> {
    let text = read_text(path)?;
    let mut csv = Csv::new(path, &text);
    let (n, t_n) = csv.dims()?;
    let mut mask = Vec::with_capacity(n * t_n);
    for _ in 0..n {
        let (line, f) = csv.next_fields("a mask row")?;
        csv.expect_len(line, &f, t_n)?;
        for v in f {
            mask.push(match v {
                "1" => true,
                "0" => false,
                other => return Err(csv.err(line, format!("mask entries must be 0 or 1, found {other:?}"))),
            });
        }
    }
    csv.expect_end()?;
    Ok((n, t_n, mask))
}

/// Per-frame file name, e.g. `frame_003.pmap`.
pub fn frame_file(frame: usize, ext: &str) -> String {
    format!("frame_{frame:03}.{ext}")
}

/// Files found in one prediction or ground-truth directory. Missing parts
/// are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameSet {
    pub poses: Option<Vec<Pose>>,
    pub tracks: Option<TrackSet>,
    pub pointmaps: Option<Vec<PointMapGrid>>,
    pub depth: Option<Vec<DepthImage>>,
}

/// Writes `poses.csv`, `tracks.csv`, `pointmaps/` and `depth/` (the `z`
/// channel of each pointmap).
pub fn write_frame_set(dir: &Path, poses: &[Pose], tracks: &TrackSet, grids: &[PointMapGrid]) -> Result<(), IoError> {
    write_poses(&dir.join("poses.csv"), poses)?;
    write_tracks(&dir.join("tracks.csv"), tracks)?;
    for g in grids {
        write_pointmap(&dir.join("pointmaps").join(frame_file(g.frame_index(), "pmap")), g)?;
        write_depth(&dir.join("depth").join(frame_file(g.frame_index(), "depth")), g.frame_index(), &depth_of(g))?;
    }
    Ok(())
}

fn frame_files(dir: &Path, ext: &str) -> Result<Option<Vec<PathBuf>>, IoError> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let entries = fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for e in entries {
        let e = e.map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == ext) {
            files.push(p);
        }
    }
    files.sort();
    Ok(Some(files))
}

fn check_frame(path: &Path, expected: usize, found: usize) -> Result<(), IoError> {
    if expected != found {
        return Err(IoError::format(path, None, format!("expected frame index {expected}, header says {found}")));
    }
    Ok(())
}

/// Reads whatever of the [`write_frame_set`] layout exists in `dir`. Frame
/// files must be numbered contiguously from zero.
pub fn read_frame_set(dir: &Path) -> Result<FrameSet, IoError> {
    if !dir.is_dir() {
        return Err(IoError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        });
    }
    let opt = |name: &str| {
        let p = dir.join(name);
        p.is_file().then_some(p)
    };
    let poses = opt("poses.csv").map(|p| read_poses(&p)).transpose()?;
    let tracks = opt("tracks.csv").map(|p| read_tracks(&p)).transpose()?;
    let pointmaps = match frame_files(&dir.join("pointmaps"), "pmap")? {
        Some(files) => {
            let mut v = Vec::new();
            for (k, f) in files.iter().enumerate() {
                let g = read_pointmap(f)?;
                check_frame(f, k, g.frame_index())?;
                v.push(g);
            }
            Some(v)
        }
        None => None,
    };
    let depth = match frame_files(&dir.join("depth"), "depth")? {
        Some(files) => {
            let mut v = Vec::new();
            for (k, f) in files.iter().enumerate() {
                let (frame, d) = read_depth(f)?;
                check_frame(f, k, frame)?;
                v.push(d);
            }
            Some(v)
        }
        None => None,
    };
    Ok(FrameSet {
        poses,
        tracks,
        pointmaps,
        depth,
    })
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub config: SceneConfig,
    pub diagonal: f64,
}

/// Writes a scene directory:
///
/// ```text
/// scene.json            config and scene diagonal
/// gt/                   poses.csv, tracks.csv, world_tracks.csv, pointmaps/, depth/
/// est/                  poses.csv, tracks.csv, pointmaps/, depth/
/// pseudo_tracks.csv     pixels and visibility, xyz = NaN
/// static_mask.csv       ground-truth static mask
/// ```
pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), IoError> {
    write_json(
        &dir.join("scene.json"),
        &SceneMeta {
            config: scene.config,
            diagonal: scene.diagonal,
        },
    )?;
    let gt = dir.join("gt");
    write_frame_set(&gt, &scene.gt_poses, &scene.gt_tracks, &scene.gt_grids)?;
    write_world_tracks(&gt.join("world_tracks.csv"), &scene.gt_world)?;
    let est = &scene.estimates;
    write_frame_set(&dir.join("est"), &est.poses, &est.tracks, &est.grids)?;
    write_pseudo_tracks(&dir.join("pseudo_tracks.csv"), &scene.pseudo)?;
    let t = &scene.gt_tracks;
    write_static_mask(&dir.join("static_mask.csv"), t.n_tracks, t.n_frames, &t.static_mask)
}

fn require<T>(dir: &Path, what: &str, v: Option<T>) -> Result<T, IoError> {
    v.ok_or_else(|| IoError::Io {
        path: dir.join(what),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "required file missing"),
    })
}

/// Reads a directory written by [`write_scene`]. A track is dynamic when its
/// world position is not bitwise constant over frames.
pub fn read_scene(dir: &Path) -> Result<SyntheticScene, IoError> {
    let meta: SceneMeta = read_json(&dir.join("scene.json"))?;
    let cfg = meta.config;
    let gt_dir = dir.join("gt");
    let gt = read_frame_set(&gt_dir)?;
    let est_dir = dir.join("est");
    let est = read_frame_set(&est_dir)?;
    let gt_world = read_world_tracks(&gt_dir.join("world_tracks.csv"))?;
    let pseudo = read_pseudo_tracks(&dir.join("pseudo_tracks.csv"))?;
    let mask_path = dir.join("static_mask.csv");
    let (mn, mt, mask) = read_static_mask(&mask_path)?;

    let mut gt_tracks = require(&gt_dir, "tracks.csv", gt.tracks)?;
    let mut est_tracks = require(&est_dir, "tracks.csv", est.tracks)?;
    let gt_poses = require(&gt_dir, "poses.csv", gt.poses)?;
    let est_poses = require(&est_dir, "poses.csv", est.poses)?;
    let gt_grids = require(&gt_dir, "pointmaps", gt.pointmaps)?;
    let est_grids = require(&est_dir, "pointmaps", est.pointmaps)?;

    let (n, t_n) = (cfg.n_tracks(), cfg.n_frames);
    let dims = [
        (gt_dir.join("tracks.csv"), gt_tracks.n_tracks, gt_tracks.n_frames),
        (est_dir.join("tracks.csv"), est_tracks.n_tracks, est_tracks.n_frames),
        (gt_dir.join("world_tracks.csv"), gt_world.n_tracks, gt_world.n_frames),
        (dir.join("pseudo_tracks.csv"), pseudo.n_tracks, pseudo.n_frames),
        (mask_path, mn, mt),
    ];
    for (path, a, b) in dims {
        if (a, b) != (n, t_n) {
            return Err(IoError::format(&path, Some(1), format!("expected {n} tracks x {t_n} frames, found {a} x {b}")));
        }
    }
    for (path, len) in [
        (gt_dir.join("poses.csv"), gt_poses.len()),
        (est_dir.join("poses.csv"), est_poses.len()),
        (gt_dir.join("pointmaps"), gt_grids.len()),
        (est_dir.join("pointmaps"), est_grids.len()),
    ] {
        if len != t_n {
            return Err(IoError::format(&path, None, format!("expected {t_n} frames, found {len}")));
        }
    }
    gt_tracks.static_mask = mask.clone();
    est_tracks.static_mask = mask;
    let is_dynamic = (0..n)
        .map(|i| (1..t_n).any(|t| gt_world.point(i, t) != gt_world.point(i, 0)))
        .collect();
    let anchor = cfg.anchor;
    let rel_poses = est_poses.iter().map(|c| relative_pose(c, &est_poses[anchor])).collect();
    Ok(SyntheticScene {
        config: cfg,
        gt_world,
        gt_poses,
        gt_grids,
        gt_tracks,
        is_dynamic,
        pseudo,
        estimates: Estimates {
            grids: est_grids,
            tracks: est_tracks,
            poses: est_poses,
            rel_poses,
        },
        diagonal: meta.diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_header_checks() {
        let p = Path::new("x.pmap");
        assert!(decode_raster(p, &[0u8; 10], 3).is_err());
        let bytes = encode_raster(2, 2, 0, [1.0; 11].into_iter());
        let e = decode_raster(p, &bytes, 3).unwrap_err().to_string();
        assert!(e.contains("x.pmap") && e.contains("2x2x3"), "{e}");
    }

    #[test]
    fn csv_errors_name_the_line() {
        let p = Path::new("tracks.csv");
        let text = format!("1,2\n{TRACK_COLUMNS}\n0,0,1,2,3,1,0,0\n0,1,1,2,oops,1,0,0\n");
        let e = decode_track_rows(p, &text).unwrap_err();
        assert!(matches!(e, IoError::Format { line: Some(4), .. }), "{e}");
        assert!(e.to_string().starts_with("tracks.csv:4:"), "{e}");
    }

    #[test]
    fn mask_round_trip() {
        let m = vec![true, false, true, true, false, false];
        let s = encode_static_mask(2, 3, &m);
        assert_eq!(s, "2,3\n1,0,1\n1,0,0\n");
    }
}
