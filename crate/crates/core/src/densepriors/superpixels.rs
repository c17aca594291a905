use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Over-segmentation of an image into 4-connected components with ids dense
/// in `[0, count)`, numbered in raster order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    ids: Vec<usize>,
    count: usize,
}

impl SuperpixelPartition {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn id(&self, y: usize, x: usize) -> usize {
        self.ids[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &id in &self.ids {
            sizes[id] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], internal: vec![0.0; n] }
    }

    fn with_sizes(size: Vec<usize>) -> Self {
        let n = size.len();
        Self { parent: (0..n).collect(), size, internal: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
    }
}

#[derive(Clone, Copy)]
struct Edge {
    weight: f64,
    a: usize,
    b: usize,
}

fn sort_edges(edges: &mut [Edge]) {
    edges.sort_by(|p, q| p.weight.total_cmp(&q.weight).then(p.a.cmp(&q.a)).then(p.b.cmp(&q.b)));
}

fn rgb_distance(image: &Tensor, hw: usize, p: usize, q: usize) -> f64 {
    let d = image.data();
    let c = image.shape()[0];
    (0..c)
        .map(|ch| {
            let diff = 255.0 * (d[ch * hw + p] - d[ch * hw + q]);
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

fn grid_edges(image: &Tensor, h: usize, w: usize, diagonal: bool) -> Vec<Edge> {
    let hw = h * w;
    let mut edges = Vec::with_capacity(hw * if diagonal { 4 } else { 2 });
    let mut push = |a: usize, b: usize| edges.push(Edge { weight: rgb_distance(image, hw, a, b), a, b });
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                push(p, p + 1);
            }
            if y + 1 < h {
                push(p, p + w);
                if diagonal {
                    if x + 1 < w {
                        push(p, p + w + 1);
                    }
                    if x > 0 {
                        push(p, p + w - 1);
                    }
                }
            }
        }
    }
    sort_edges(&mut edges);
    edges
}

/// Graph-based segmentation of an RGB image with channel values in `[0, 1]`
/// (distances are measured on the `0..255` scale).
///
/// Merging runs on the 8-connected grid. Because a region joined only through
/// a diagonal is not 4-connected, the result is then split into 4-connected
/// pieces and any piece below `min_size` is merged into a 4-adjacent
/// neighbor along the cheapest edge. If the whole image is smaller than
/// `min_size` the single resulting component is necessarily smaller too.
pub fn felzenszwalb_segment(image: &Tensor, k: f64, min_size: usize) -> Result<SuperpixelPartition> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::invalid(format!("k must be positive, got {k}")));
    }
    if min_size == 0 {
        return Err(Error::invalid("min_size must be positive"));
    }
    let (_, h, w) = image.dims3()?;
    let n = h * w;
    if n == 0 {
        return Err(Error::invalid("image is empty"));
    }

    let edges = grid_edges(image, h, w, true);
    let mut set = DisjointSet::new(n);
    for e in &edges {
        let (ra, rb) = (set.find(e.a), set.find(e.b));
        if ra == rb {
            continue;
        }
        let ta = set.internal[ra] + k / set.size[ra] as f64;
        let tb = set.internal[rb] + k / set.size[rb] as f64;
        if e.weight <= ta.min(tb) {
            set.union(ra, rb, e.weight);
        }
    }
    for e in &edges {
        let (ra, rb) = (set.find(e.a), set.find(e.b));
        if ra != rb && (set.size[ra] < min_size || set.size[rb] < min_size) {
            set.union(ra, rb, e.weight);
        }
    }
    let roots: Vec<usize> = (0..n).map(|p| set.find(p)).collect();

    // 4-connected pieces of each component.
    let mut piece = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if piece[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        piece[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let neighbors = [
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
            ];
            for q in neighbors.into_iter().flatten() {
                if piece[q] == usize::MAX && roots[q] == roots[p] {
                    piece[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }

    let mut pieces = DisjointSet::with_sizes(sizes);
    for e in grid_edges(image, h, w, false) {
        let (ra, rb) = (pieces.find(piece[e.a]), pieces.find(piece[e.b]));
        if ra != rb && (pieces.size[ra] < min_size || pieces.size[rb] < min_size) {
            pieces.union(ra, rb, e.weight);
        }
    }

    let mut dense = vec![usize::MAX; piece.len().max(1)];
    let mut ids = Vec::with_capacity(n);
    let mut count = 0;
    for &p in &piece {
        let r = pieces.find(p);
        if dense[r] == usize::MAX {
            dense[r] = count;
            count += 1;
        }
        ids.push(dense[r]);
    }
    Ok(SuperpixelPartition { height: h, width: w, ids, count })
}

/// Relabel every superpixel with its most frequent label; ties go to the lower label.
pub fn smooth_sppxl(mask: &LabelMask, partition: &SuperpixelPartition) -> Result<LabelMask> {
    if mask.dims() != (partition.height, partition.width) {
        return Err(Error::shape(format!(
            "mask is {}x{}, partition is {}x{}",
            mask.height(),
            mask.width(),
            partition.height,
            partition.width
        )));
    }
    let mut votes = vec![[0usize; 256]; partition.count];
    for (&id, &label) in partition.ids.iter().zip(mask.labels()) {
        votes[id][label as usize] += 1;
    }
    let modal: Vec<u8> = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for (l, &c) in v.iter().enumerate() {
                if c > v[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    let labels = partition.ids.iter().map(|&id| modal[id]).collect();
    LabelMask::from_vec(mask.height(), mask.width(), labels)
}
