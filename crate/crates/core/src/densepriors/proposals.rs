use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::pnm;
use crate::tensor::Tensor;

use super::posteriors::WeightedMaps;

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Inclusive pixel extents.
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
    /// Row-major membership bitmap.
    Mask { height: usize, width: usize, members: Vec<bool> },
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Region::Box { x0, y0, x1, y1 } => (*x0..=*x1).contains(&x) && (*y0..=*y1).contains(&y),
            Region::Mask { height, width, members } => y < *height && x < *width && members[y * width + x],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub region: Region,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalKind {
    Boxes,
    Masks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub kind: ProposalKind,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    /// Builds a set from raw scores, rescaling them to `[0, 1]` by min-max.
    /// A set whose scores are all equal (including a single proposal) maps to 1.
    pub fn normalized(kind: ProposalKind, mut proposals: Vec<Proposal>) -> Result<Self> {
        if proposals.is_empty() {
            return Err(Error::invalid("proposal set is empty"));
        }
        for p in &proposals {
            let ok = match (&p.region, kind) {
                (Region::Box { x0, y0, x1, y1 }, ProposalKind::Boxes) => x0 <= x1 && y0 <= y1,
                (Region::Mask { members, .. }, ProposalKind::Masks) => members.iter().any(|&m| m),
                _ => false,
            };
            if !ok || !p.score.is_finite() {
                return Err(Error::invalid(format!("malformed or empty proposal {:?}", p.region)));
            }
        }
        let lo = proposals.iter().map(|p| p.score).fold(f64::INFINITY, f64::min);
        let hi = proposals.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
        for p in &mut proposals {
            p.score = if hi > lo { (p.score - lo) / (hi - lo) } else { 1.0 };
        }
        Ok(ProposalSet { kind, proposals })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parses proposal text. Box lines are `x0,y0,x1,y1,score`; mask lines are
/// `file.pgm,score`, with mask paths resolved against `base_dir`. Blank lines
/// and lines starting with `#` are skipped. One file holds one kind.
pub fn parse_proposals(text: &str, base_dir: &Path) -> Result<ProposalSet> {
    let mut kind = None;
    let mut proposals = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (this_kind, region, score_field) = match fields.len() {
            5 => {
                let mut v = [0usize; 4];
                for (slot, f) in v.iter_mut().zip(&fields[..4]) {
                    *slot = f
                        .parse()
                        .map_err(|_| parse_error(line_no, format!("box coordinate {f:?} is not a non-negative integer")))?;
                }
                let [x0, y0, x1, y1] = v;
                if x0 > x1 || y0 > y1 {
                    return Err(parse_error(line_no, "box corners out of order"));
                }
                (ProposalKind::Boxes, Region::Box { x0, y0, x1, y1 }, fields[4])
            }
            2 => {
                let mask = pnm::read_mask(&base_dir.join(fields[0]))
                    .map_err(|e| parse_error(line_no, format!("cannot read mask {}: {e}", fields[0])))?;
                let members: Vec<bool> = mask.labels().iter().map(|&v| v != 0).collect();
                if !members.iter().any(|&m| m) {
                    return Err(parse_error(line_no, "mask has no member pixels"));
                }
                let region = Region::Mask { height: mask.height(), width: mask.width(), members };
                (ProposalKind::Masks, region, fields[1])
            }
            n => return Err(parse_error(line_no, format!("expected 5 (box) or 2 (mask) fields, found {n}"))),
        };
        let score: f64 = score_field
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_error(line_no, format!("score {score_field:?} is not a finite number")))?;
        match kind {
            None => kind = Some(this_kind),
            Some(k) if k != this_kind => return Err(parse_error(line_no, "boxes and masks mixed in one file")),
            _ => {}
        }
        proposals.push(Proposal { region, score });
    }
    let kind = kind.ok_or_else(|| Error::invalid("proposal file has no proposals"))?;
    ProposalSet::normalized(kind, proposals)
}

pub fn load_proposals(path: &Path) -> Result<ProposalSet> {
    let text = fs::read_to_string(path)?;
    parse_proposals(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Per-pixel objectness in `[0, 1]`: mean score of the regions covering the
/// pixel, 0 where none does.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ObjectnessMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ObjectnessMap { height, width, values: vec![value; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

pub fn objectness_map(proposals: &ProposalSet, h: usize, w: usize) -> Result<ObjectnessMap> {
    // Boxes accumulate through 2-D difference arrays; masks are added directly.
    let mut sum = vec![0.0; (h + 1) * (w + 1)];
    let mut count = vec![0i64; (h + 1) * (w + 1)];
    let stride = w + 1;
    let mut direct_sum = vec![0.0; h * w];
    let mut direct_count = vec![0i64; h * w];
    for p in &proposals.proposals {
        match &p.region {
            &Region::Box { x0, y0, x1, y1 } => {
                if x1 >= w || y1 >= h || x0 > x1 || y0 > y1 {
                    return Err(Error::invalid(format!(
                        "box ({x0},{y0})-({x1},{y1}) outside {w}x{h} image"
                    )));
                }
                for (idx, sign) in [
                    (y0 * stride + x0, 1),
                    (y0 * stride + x1 + 1, -1),
                    ((y1 + 1) * stride + x0, -1),
                    ((y1 + 1) * stride + x1 + 1, 1),
                ] {
                    sum[idx] += sign as f64 * p.score;
                    count[idx] += sign;
                }
            }
            Region::Mask { height, width, members } => {
                if (*height, *width) != (h, w) {
                    return Err(Error::invalid(format!(
                        "mask proposal is {width}x{height}, image is {w}x{h}"
                    )));
                }
                for (i, _) in members.iter().enumerate().filter(|(_, &m)| m) {
                    direct_sum[i] += p.score;
                    direct_count[i] += 1;
                }
            }
        }
    }
    for y in 0..=h {
        for x in 0..=w {
            let i = y * stride + x;
            if x > 0 {
                sum[i] += sum[i - 1];
                count[i] += count[i - 1];
            }
        }
    }
    for y in 1..=h {
        for x in 0..=w {
            let i = y * stride + x;
            sum[i] += sum[i - stride];
            count[i] += count[i - stride];
        }
    }
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (s, c) = (sum[y * stride + x] + direct_sum[y * w + x], count[y * stride + x] + direct_count[y * w + x]);
            if c > 0 {
                // Prefix sums of floats can leave tiny residues; the mean of
                // scores in [0, 1] is clamped back into range.
                values[y * w + x] = (s / c as f64).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ObjectnessMap { height: h, width: w, values })
}

/// Per-class confidence thresholds `δ_k ∈ [0, 1)` for the foreground classes
/// `1..=len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet(Vec<f64>);

impl ThresholdSet {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if let Some(d) = deltas.iter().find(|d| !(0.0..1.0).contains(*d)) {
            return Err(Error::invalid(format!("threshold {d} outside [0, 1)")));
        }
        Ok(ThresholdSet(deltas))
    }

    pub fn uniform(foreground_classes: usize, delta: f64) -> Result<Self> {
        Self::new(vec![delta; foreground_classes])
    }

    /// Threshold for foreground class `class` (1-based).
    pub fn delta(&self, class: usize) -> f64 {
        self.0[class - 1]
    }

    pub fn set(&mut self, class: usize, delta: f64) -> Result<()> {
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("threshold {delta} outside [0, 1)")));
        }
        self.0[class - 1] = delta;
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn foreground_classes(&self) -> usize {
        self.0.len()
    }
}

/// Assigns the best foreground class `k̂` where `ŷ′(k̂)·p(Obj) > δ_k̂`, background elsewhere.
pub fn smooth_proposals(weighted: &WeightedMaps, obj: &ObjectnessMap, thresholds: &ThresholdSet) -> Result<LabelMask> {
    let (k, h, w) = weighted.0.dims3()?;
    if (obj.height, obj.width) != (h, w) {
        return Err(Error::shape(format!("objectness is {}x{}, maps are {h}x{w}", obj.height, obj.width)));
    }
    if thresholds.foreground_classes() != k - 1 {
        return Err(Error::shape(format!(
            "{} thresholds for {} foreground classes",
            thresholds.foreground_classes(),
            k - 1
        )));
    }
    let n = h * w;
    let data = weighted.0.data();
    let mut mask = LabelMask::new(h, w);
    for (i, label) in mask.labels_mut().iter_mut().enumerate() {
        let mut best = 1;
        for c in 2..k {
            if data[c * n + i] > data[best * n + i] {
                best = c;
            }
        }
        if data[best * n + i] * obj.values[i] > thresholds.delta(best) {
            *label = best as u8;
        }
    }
    Ok(mask)
}

fn gradient_magnitude(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = image.dims3()?;
    let gray: Vec<f64> = (0..h * w).map(|i| (0..c).map(|ch| image.data()[ch * h * w + i]).sum::<f64>() / c as f64).collect();
    let at = |y: usize, x: usize| gray[y * w + x];
    let mut g = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            g[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    Ok(g)
}

struct Integral {
    stride: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], h: usize, w: usize) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += values[y * w + x];
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Integral { stride, table }
    }

    /// Sum over rows `y0..y1`, columns `x0..x1` (exclusive ends).
    fn sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let t = &self.table;
        let s = self.stride;
        t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
    }
}

/// Multi-scale sliding-window boxes scored by how much gradient energy sits on
/// the box border relative to its interior, keeping the best `count`.
pub fn naive_proposals(image: &Tensor, count: usize) -> Result<ProposalSet> {
    if count == 0 {
        return Err(Error::invalid("proposal count must be positive"));
    }
    let (_, h, w) = image.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::TooSmall(format!("{h}x{w} image is too small for box proposals")));
    }
    let energy = Integral::new(&gradient_magnitude(image)?, h, w);
    let side = h.min(w);
    let fractions = [0.25, 0.35, 0.5, 0.65, 0.8, 1.0];
    let aspects = [(1usize, 1usize), (1, 2), (2, 1)];

    let mut candidates: Vec<(f64, Region)> = Vec::new();
    let mut step_div = 4;
    loop {
        candidates.clear();
        let mut seen = std::collections::HashSet::new();
        for &f in &fractions {
            let base = ((side as f64 * f).round() as usize).max(2);
            for &(ay, ax) in &aspects {
                let bh = (base * ay / ay.max(ax)).clamp(2, h);
                let bw = (base * ax / ay.max(ax)).clamp(2, w);
                let step = (bh.min(bw) / step_div).max(1);
                let mut y0 = 0;
                while y0 + bh <= h {
                    let mut x0 = 0;
                    while x0 + bw <= w {
                        if seen.insert((y0, x0, bh, bw)) {
                            let (y1, x1) = (y0 + bh, x0 + bw);
                            let total = energy.sum(y0, x0, y1, x1);
                            let inner = if bh > 2 && bw > 2 { energy.sum(y0 + 1, x0 + 1, y1 - 1, x1 - 1) } else { 0.0 };
                            let border_px = (bh * bw - (bh.saturating_sub(2)) * (bw.saturating_sub(2))) as f64;
                            let inner_px = ((bh.saturating_sub(2)) * (bw.saturating_sub(2))).max(1) as f64;
                            let score = (total - inner) / border_px - inner / inner_px;
                            candidates.push((score, Region::Box { x0, y0, x1: x1 - 1, y1: y1 - 1 }));
                        }
                        x0 += step;
                    }
                    y0 += step;
                }
            }
        }
        if candidates.len() >= count || step_div >= side {
            break;
        }
        step_div *= 2;
    }
    if candidates.len() < count {
        return Err(Error::invalid(format!(
            "a {w}x{h} image yields only {} candidate boxes, {count} requested",
            candidates.len()
        )));
    }
    // Stable sort keeps generation order among equal scores.
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    candidates.truncate(count);
    let proposals = candidates.into_iter().map(|(score, region)| Proposal { region, score }).collect();
    ProposalSet::normalized(ProposalKind::Boxes, proposals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes(list: &[(usize, usize, usize, usize, f64)]) -> ProposalSet {
        ProposalSet {
            kind: ProposalKind::Boxes,
            proposals: list
                .iter()
                .map(|&(x0, y0, x1, y1, score)| Proposal { region: Region::Box { x0, y0, x1, y1 }, score })
                .collect(),
        }
    }

    #[test]
    fn single_box() {
        let m = objectness_map(&boxes(&[(1, 1, 2, 3, 1.0)]), 5, 4).unwrap();
        for y in 0..5 {
            for x in 0..4 {
                let inside = (1..=2).contains(&x) && (1..=3).contains(&y);
                assert_eq!(m.get(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn overlap_averages() {
        let m = objectness_map(&boxes(&[(0, 0, 3, 3, 0.4), (2, 2, 5, 5, 0.8)]), 6, 6).unwrap();
        assert!((m.get(2, 3) - 0.6).abs() < 1e-12);
        assert!((m.get(0, 0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(objectness_map(&boxes(&[(0, 0, 4, 1, 1.0)]), 4, 4).is_err());
    }

    #[test]
    fn parse_box_file() {
        let set = parse_proposals("# boxes\n0,0,9,9,0.7\n", Path::new(".")).unwrap();
        assert_eq!(set.kind, ProposalKind::Boxes);
        assert_eq!(set.proposals[0].score, 1.0);
        let set = parse_proposals("0,0,1,1,2\n1,1,2,2,4\n0,0,3,3,3\n", Path::new(".")).unwrap();
        let s: Vec<f64> = set.proposals.iter().map(|p| p.score).collect();
        assert_eq!(s, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_proposals("0,0,1,1,0.5\n\n0,0,x,1,0.5\n", Path::new(".")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_proposals("1,2,3\n", Path::new(".")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(parse_proposals("", Path::new(".")).is_err());
        assert!(parse_proposals("# nothing\n", Path::new(".")).is_err());
    }

    #[test]
    fn thresholds_validated() {
        assert!(ThresholdSet::new(vec![0.0, 0.99]).is_ok());
        assert!(ThresholdSet::new(vec![1.0]).is_err());
        assert!(ThresholdSet::new(vec![-0.1]).is_err());
    }

    fn weighted(values: &[[f64; 3]]) -> WeightedMaps {
        let n = values.len();
        let mut data = vec![0.0; 3 * n];
        for (i, v) in values.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        WeightedMaps(Tensor::from_vec(&[3, 1, n], data).unwrap())
    }

    #[test]
    fn proposal_rule() {
        let wm = weighted(&[[0.05, 0.9, 0.05], [0.9, 0.05, 0.05], [0.0, 0.0, 0.0]]);
        let t = ThresholdSet::new(vec![0.5, 0.5]).unwrap();
        let obj = ObjectnessMap::filled(1, 3, 0.6);
        assert_eq!(smooth_proposals(&wm, &obj, &t).unwrap().labels(), &[1, 0, 0]);
        let none = ObjectnessMap::filled(1, 3, 0.0);
        assert!(smooth_proposals(&wm, &none, &t).unwrap().labels().iter().all(|&l| l == 0));
        let zero = ThresholdSet::new(vec![0.0, 0.0]).unwrap();
        let full = ObjectnessMap::filled(1, 3, 1.0);
        // Background is excluded from the argmax, so pixel 1 goes to class 1.
        assert_eq!(smooth_proposals(&wm, &full, &zero).unwrap().labels(), &[1, 1, 0]);
    }

    #[test]
    fn naive_count_and_blank_image() {
        let blank = Tensor::filled(&[3, 32, 32], 0.5);
        let set = naive_proposals(&blank, 50).unwrap();
        assert_eq!(set.len(), 50);
        assert!(set.proposals.iter().all(|p| p.score == 1.0));
        assert!(naive_proposals(&blank, 0).is_err());
    }
}
