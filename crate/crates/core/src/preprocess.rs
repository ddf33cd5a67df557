//! Person-box geometry for top-down clips: aspect padding, crop-resize,
//! gap filling and per-track window extraction.

use std::collections::BTreeMap;

use crate::pipeline::window_indices;
use crate::tensor::{Grid2, Tensor4};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("degenerate box: {0}")]
    Degenerate(String),
    #[error("track {0} has no detections")]
    EmptyTrack(u32),
    #[error("track line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Axis-aligned box in pixels; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, PreprocessError> {
        let b = BoundingBox { x, y, w, h };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<(), PreprocessError> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(PreprocessError::Degenerate(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.x + self.w >= other.x + other.w
            && self.y + self.h >= other.y + other.h
    }
}

/// Height-to-width ratio as a fraction, so that 4:3 stays exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aspect {
    pub h: f64,
    pub w: f64,
}

/// The pose network's 256x192 input aspect.
pub const POSE_ASPECT: Aspect = Aspect { h: 4.0, w: 3.0 };
pub const POSE_INPUT: (usize, usize) = (256, 192);

/// Grows the relatively short side symmetrically about the center until
/// `h / w` equals the aspect.
pub fn pad_to_aspect(b: BoundingBox, aspect: Aspect) -> Result<BoundingBox, PreprocessError> {
    b.check()?;
    if !(aspect.h > 0.0 && aspect.w > 0.0 && aspect.h.is_finite() && aspect.w.is_finite()) {
        return Err(PreprocessError::Invalid(format!("aspect {aspect:?}")));
    }
    let (cx, cy) = b.center();
    let (w, h) = if b.h * aspect.w > b.w * aspect.h {
        (b.h * aspect.w / aspect.h, b.h)
    } else if b.h * aspect.w < b.w * aspect.h {
        (b.w, b.w * aspect.h / aspect.w)
    } else {
        return Ok(b);
    };
    Ok(BoundingBox {
        x: cx - w / 2.0,
        y: cy - h / 2.0,
        w,
        h,
    })
}

/// Bilinear resample of the boxed region to `out_h x out_w`. Output corners
/// sample the box's first and last pixel centers; samples outside the frame
/// read zero.
pub fn crop_resize(frame: &Grid2, b: &BoundingBox, out_h: usize, out_w: usize) -> Result<Grid2, PreprocessError> {
    b.check()?;
    if out_h == 0 || out_w == 0 {
        return Err(PreprocessError::Invalid(format!("output size {out_h}x{out_w}")));
    }
    let axis = |start: f64, extent: f64, n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![start + (extent - 1.0) / 2.0];
        }
        let step = (extent - 1.0) / (n - 1) as f64;
        (0..n).map(|i| start + i as f64 * step).collect()
    };
    let ys = axis(b.y, b.h, out_h);
    let xs = axis(b.x, b.w, out_w);
    let mut out = Grid2::zeros(out_h, out_w);
    for (row, &y) in out.data.chunks_exact_mut(out_w).zip(&ys) {
        for (v, &x) in row.iter_mut().zip(&xs) {
            *v = frame.sample(y, x);
        }
    }
    Ok(out)
}

/// Boxes of one tracked person over frames `start..start + boxes.len()`;
/// `None` marks a missed detection.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTrack {
    pub id: u32,
    pub start: usize,
    pub boxes: Vec<Option<BoundingBox>>,
}

impl BoxTrack {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.boxes.len()
    }

    pub fn is_resolved(&self) -> bool {
        self.boxes.iter().all(Option::is_some)
    }

    /// Box at an absolute frame of a resolved track.
    pub fn box_at(&self, frame: usize) -> Option<BoundingBox> {
        frame.checked_sub(self.start).and_then(|i| self.boxes.get(i).copied().flatten())
    }
}

/// Fills every missed detection with the previous frame's box; frames before
/// the first detection take the first detected box.
pub fn resolve_track(track: &BoxTrack) -> Result<BoxTrack, PreprocessError> {
    let first = track
        .boxes
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or(PreprocessError::EmptyTrack(track.id))?;
    let mut last = first;
    let boxes = track
        .boxes
        .iter()
        .map(|b| {
            if let Some(b) = b {
                last = *b;
            }
            Some(last)
        })
        .collect();
    Ok(BoxTrack { boxes, ..track.clone() })
}

/// Parses `track_id, frame, x, y, w, h` records, one per line. Blank lines
/// and `#` comments are skipped. Each track spans its first to last listed
/// frame; frames missing in between are gaps.
pub fn parse_tracks(text: &str) -> Result<Vec<BoxTrack>, PreprocessError> {
    let mut by_id: BTreeMap<u32, BTreeMap<usize, BoundingBox>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |reason: String| PreprocessError::Parse { line, reason };
        let fields: Vec<&str> = body.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 comma-separated fields, got {}", fields.len())));
        }
        let id: u32 = fields[0].parse().map_err(|e| err(format!("track id {:?}: {e}", fields[0])))?;
        let frame: usize = fields[1].parse().map_err(|e| err(format!("frame {:?}: {e}", fields[1])))?;
        let mut g = [0.0; 4];
        for (v, f) in g.iter_mut().zip(&fields[2..]) {
            *v = f.parse().map_err(|e| err(format!("coordinate {f:?}: {e}")))?;
        }
        let b = BoundingBox::new(g[0], g[1], g[2], g[3]).map_err(|e| err(e.to_string()))?;
        if by_id.entry(id).or_default().insert(frame, b).is_some() {
            return Err(err(format!("track {id} lists frame {frame} twice")));
        }
    }
    Ok(by_id
        .into_iter()
        .map(|(id, frames)| {
            let start = *frames.keys().next().expect("tracks are created with a frame");
            let end = *frames.keys().next_back().expect("non-empty");
            BoxTrack {
                id,
                start,
                boxes: (start..=end).map(|f| frames.get(&f).copied()).collect(),
            }
        })
        .collect())
}

/// One classifiable window of one track.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackWindow {
    pub track: u32,
    /// First and last absolute frame covered, inclusive.
    pub start: usize,
    pub end: usize,
    /// Absolute source frame of each window position; loops when the track
    /// is shorter than the window.
    pub frames: Vec<usize>,
}

/// Sliding windows of `length` frames every `stride` frames over each
/// track's span. A span shorter than the window yields one looped window; a
/// span the stride does not land on exactly gets one more window aligned
/// to its end, so every frame is covered whenever `stride <= length`.
pub fn extract_track_windows(
    tracks: &[BoxTrack],
    clip_frames: usize,
    length: usize,
    stride: usize,
) -> Result<Vec<TrackWindow>, PreprocessError> {
    if length == 0 || stride == 0 {
        return Err(PreprocessError::Invalid("window length and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for track in tracks {
        let span = track.span();
        if span.is_empty() || span.end > clip_frames {
            return Err(PreprocessError::Invalid(format!(
                "track {} spans frames {span:?} of a {clip_frames}-frame clip",
                track.id
            )));
        }
        let n = span.len();
        let mut starts: Vec<usize> = if n < length {
            vec![0]
        } else {
            (0..=(n - length) / stride).map(|k| k * stride).collect()
        };
        let last = *starts.last().expect("at least one window");
        if n >= length && last + length < n {
            starts.push(n - length);
        }
        for s in starts {
            let frames: Vec<usize> = window_indices(n, s, length).into_iter().map(|f| span.start + f).collect();
            out.push(TrackWindow {
                track: track.id,
                start: span.start + s,
                end: span.start + (s + length).min(n) - 1,
                frames,
            });
        }
    }
    Ok(out)
}

/// Crops every channel of the window's frames to the track's box (padded to
/// `aspect`) and resizes to `out`, giving a `(c, window, out_h, out_w)` clip.
pub fn crop_track_window(
    clip: &Tensor4<f32>,
    track: &BoxTrack,
    window: &TrackWindow,
    aspect: Aspect,
    (out_h, out_w): (usize, usize),
) -> Result<Tensor4<f32>, PreprocessError> {
    let s = clip.shape();
    let mut out = Tensor4::zeros((s.c, window.frames.len(), out_h, out_w));
    for (i, &f) in window.frames.iter().enumerate() {
        if f >= s.t {
            return Err(PreprocessError::Invalid(format!("frame {f} outside a {}-frame clip", s.t)));
        }
        let b = track
            .box_at(f)
            .ok_or_else(|| PreprocessError::Invalid(format!("track {} has no box at frame {f}", track.id)))?;
        let b = pad_to_aspect(b, aspect)?;
        for c in 0..s.c {
            let plane = Grid2::from_vec(s.h, s.w, clip.frame(c, f).to_vec()).expect("frame size matches");
            let crop = crop_resize(&plane, &b, out_h, out_w)?;
            out.frame_mut(c, i).copy_from_slice(&crop.data);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn square_box_grows_in_height() {
        let p = pad_to_aspect(bx(10.0, 20.0, 100.0, 100.0), POSE_ASPECT).unwrap();
        assert_eq!(p.w, 100.0);
        assert!((p.h - 400.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.center(), (60.0, 70.0));
    }

    #[test]
    fn tall_box_grows_in_width() {
        let p = pad_to_aspect(bx(0.0, 0.0, 90.0, 160.0), POSE_ASPECT).unwrap();
        assert_eq!((p.w, p.h), (120.0, 160.0));
        assert_eq!(p.x, -15.0);
    }

    #[test]
    fn four_by_three_box_is_fixed() {
        let b = bx(1.0, 2.0, 30.0, 40.0);
        assert_eq!(pad_to_aspect(b, POSE_ASPECT).unwrap(), b);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, -1.0).is_err());
        let bad = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 };
        assert!(pad_to_aspect(bad, POSE_ASPECT).is_err());
        assert!(crop_resize(&Grid2::zeros(4, 4), &bad, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn padded_box_has_aspect_and_contains_input(
            x in -50.0f64..50.0, y in -50.0f64..50.0, w in 0.5f64..300.0, h in 0.5f64..300.0,
        ) {
            let b = bx(x, y, w, h);
            let p = pad_to_aspect(b, POSE_ASPECT).unwrap();
            prop_assert!((p.h / p.w - 4.0 / 3.0).abs() < 1e-9);
            let slack = 1e-9 * (1.0 + x.abs() + y.abs() + w + h);
            let grown = BoundingBox { x: p.x - slack, y: p.y - slack, w: p.w + 2.0 * slack, h: p.h + 2.0 * slack };
            prop_assert!(grown.contains(&b));
        }
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let g = Grid2::from_fn(5, 7, |r, c| (r * 7 + c) as f32 * 0.1);
        let out = crop_resize(&g, &bx(0.0, 0.0, 7.0, 5.0), 5, 7).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn constant_frame_stays_constant() {
        let g = Grid2::from_fn(20, 16, |_, _| 0.75);
        for b in [bx(2.0, 3.0, 9.0, 12.0), bx(0.5, 0.25, 14.5, 18.0), bx(4.0, 4.0, 1.5, 2.0)] {
            let out = crop_resize(&g, &b, 8, 6).unwrap();
            assert!(out.data.iter().all(|&v| (v - 0.75).abs() < 1e-6), "{b:?}");
        }
    }

    #[test]
    fn ramp_upscale_matches_closed_form() {
        // bilinear interpolation reproduces a linear ramp exactly
        let g = Grid2::from_fn(10, 10, |r, c| 0.5 * r as f32 + 0.25 * c as f32);
        let b = bx(2.0, 3.0, 4.0, 4.0);
        let out = crop_resize(&g, &b, 7, 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let y = 3.0 + i as f64 * 0.5;
                let x = 2.0 + j as f64 * 0.5;
                assert!((out.get(i, j) as f64 - (0.5 * y + 0.25 * x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn outside_the_frame_reads_zero() {
        let g = Grid2::from_fn(4, 4, |_, _| 1.0);
        let out = crop_resize(&g, &bx(-4.0, 0.0, 8.0, 4.0), 4, 8).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 7), 1.0);
    }

    fn track(start: usize, boxes: Vec<Option<BoundingBox>>) -> BoxTrack {
        BoxTrack { id: 1, start, boxes }
    }

    #[test]
    fn gaps_take_the_previous_box() {
        let (a, b) = (bx(0.0, 0.0, 1.0, 1.0), bx(5.0, 5.0, 2.0, 2.0));
        let r = resolve_track(&track(0, vec![Some(a), None, Some(b), None])).unwrap();
        assert_eq!(r.boxes, vec![Some(a), Some(a), Some(b), Some(b)]);
        assert!(r.is_resolved());
    }

    #[test]
    fn leading_gap_takes_the_first_box() {
        let a = bx(3.0, 3.0, 2.0, 2.0);
        let mut boxes = vec![None; 10];
        boxes[5] = Some(a);
        let r = resolve_track(&track(0, boxes)).unwrap();
        assert_eq!(r.boxes, vec![Some(a); 10]);
        assert_eq!(resolve_track(&r).unwrap(), r);
    }

    #[test]
    fn empty_track_rejected() {
        assert_eq!(resolve_track(&track(0, vec![None; 3])), Err(PreprocessError::EmptyTrack(1)));
    }

    #[test]
    fn two_tracks_give_six_windows() {
        let b = Some(bx(0.0, 0.0, 4.0, 4.0));
        let tracks = [BoxTrack { id: 1, start: 0, boxes: vec![b; 64] }, BoxTrack { id: 2, start: 0, boxes: vec![b; 64] }];
        let w = extract_track_windows(&tracks, 64, 32, 16).unwrap();
        let triples: Vec<_> = w.iter().map(|w| (w.track, w.start, w.end)).collect();
        assert_eq!(
            triples,
            [(1, 0, 31), (1, 16, 47), (1, 32, 63), (2, 0, 31), (2, 16, 47), (2, 32, 63)]
        );
        assert_eq!(w[1].frames, (16..48).collect::<Vec<_>>());
    }

    #[test]
    fn short_track_gives_one_looped_window() {
        let b = Some(bx(0.0, 0.0, 4.0, 4.0));
        let w = extract_track_windows(&[BoxTrack { id: 7, start: 10, boxes: vec![b; 20] }], 40, 32, 16).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].start, w[0].end), (10, 29));
        let want: Vec<usize> = (10..30).chain(10..22).collect();
        assert_eq!(w[0].frames, want);
    }

    #[test]
    fn uneven_span_gets_an_end_aligned_window() {
        let b = Some(bx(0.0, 0.0, 4.0, 4.0));
        let w = extract_track_windows(&[BoxTrack { id: 1, start: 0, boxes: vec![b; 70] }], 70, 32, 16).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.start).collect();
        assert_eq!(starts, [0, 16, 32, 38]);
        assert_eq!(w.last().unwrap().end, 69);
    }

    proptest! {
        #[test]
        fn windows_cover_the_span_and_stay_inside(start in 0usize..20, len in 1usize..150, stride in 1usize..=32) {
            let b = Some(bx(0.0, 0.0, 4.0, 4.0));
            let t = BoxTrack { id: 0, start, boxes: vec![b; len] };
            let w = extract_track_windows(&[t], start + len, 32, stride).unwrap();
            let mut covered = vec![false; len];
            for win in &w {
                prop_assert_eq!(win.frames.len(), 32);
                prop_assert!(win.start >= start && win.end < start + len);
                for &f in &win.frames {
                    prop_assert!(f >= start && f < start + len);
                    covered[f - start] = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn parse_tracks_builds_gapped_spans() {
        let text = "# id, frame, x, y, w, h\n2, 4, 1, 1, 10, 20\n1, 0, 0, 0, 5, 5\n1, 2, 1.5, 0, 5, 5\n";
        let t = parse_tracks(text).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].id, t[0].start, t[0].boxes.len()), (1, 0, 3));
        assert!(t[0].boxes[1].is_none());
        assert_eq!(t[1].span(), 4..5);
    }

    #[test]
    fn parse_tracks_reports_bad_lines() {
        assert!(matches!(parse_tracks("1, 0, 0, 0, 5\n"), Err(PreprocessError::Parse { line: 1, .. })));
        assert!(matches!(parse_tracks("\n1, 0, 0, 0, 0, 5\n"), Err(PreprocessError::Parse { line: 2, .. })));
        assert!(matches!(
            parse_tracks("1, 0, 0, 0, 5, 5\n1, 0, 0, 0, 5, 5\n"),
            Err(PreprocessError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn cropped_window_follows_the_box() {
        // one channel with a bright pixel at (row 6, col 9) in every frame
        let mut clip = Tensor4::<f32>::zeros((1, 4, 16, 16));
        for t in 0..4 {
            clip.set(0, t, 6, 9, 1.0);
        }
        let b = Some(bx(6.0, 2.0, 6.0, 8.0));
        let track = BoxTrack { id: 0, start: 0, boxes: vec![b; 4] };
        let w = &extract_track_windows(&[track.clone()], 4, 4, 4).unwrap()[0];
        let out = crop_track_window(&clip, &track, w, POSE_ASPECT, (8, 6)).unwrap();
        assert_eq!(out.shape().t, 4);
        // box already 4:3, so output pixel (r, c) samples (2 + r, 6 + c)
        assert_eq!(out.get(0, 2, 4, 3), 1.0);
        assert_eq!(out.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }
}
