//! The 256-case marching-cubes triangle table, generated once at startup.
//!
//! Cases are built by walking the cube's faces: crossed edges on each face
//! are paired so that inside corners are separated (the fixed rule both
//! neighbors of a shared face apply identically, which is what makes
//! adjacent cells stitch), the pairings are chained into closed loops, each
//! loop is oriented so its normal points from inside (value < iso) toward
//! outside, and fan-triangulated.

use std::sync::OnceLock;

/// Corner i sits at (i & 1, (i >> 1) & 1, (i >> 2) & 1).
pub const CORNER_POS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Edge endpoints; edges 0-3 run along x, 4-7 along y, 8-11 along z.
pub const EDGE_ENDPOINTS: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Axis of each edge (0 = x, 1 = y, 2 = z).
pub const EDGE_AXIS: [usize; 12] = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];

/// The four edges bounding each face.
const FACE_EDGES: [[usize; 4]; 6] = [
    [4, 6, 8, 10],  // x = 0
    [5, 7, 9, 11],  // x = 1
    [0, 2, 8, 9],   // y = 0
    [1, 3, 10, 11], // y = 1
    [0, 1, 4, 5],   // z = 0
    [2, 3, 6, 7],   // z = 1
];

/// Triangles per case, as triples of edge indices.
pub type CaseTable = Vec<Vec<[u8; 3]>>;

fn edge_crossed(config: u8, e: usize) -> bool {
    let (a, b) = EDGE_ENDPOINTS[e];
    let ia = config >> a & 1;
    let ib = config >> b & 1;
    ia != ib
}

fn inside(config: u8, corner: usize) -> bool {
    config >> corner & 1 == 1
}

/// Pair the crossed edges of one face. With four crossings (diagonal case)
/// each inside corner takes its two incident crossed edges, separating the
/// inside corners.
fn face_pairs(config: u8, face: usize) -> Vec<(usize, usize)> {
    let crossed: Vec<usize> = FACE_EDGES[face]
        .iter()
        .copied()
        .filter(|e| edge_crossed(config, *e))
        .collect();
    match crossed.len() {
        0 => Vec::new(),
        2 => vec![(crossed[0], crossed[1])],
        4 => {
            // Find the face's inside corners (exactly two, diagonal).
            let mut pairs = Vec::new();
            let mut corners: Vec<usize> = Vec::new();
            for e in &FACE_EDGES[face] {
                let (a, b) = EDGE_ENDPOINTS[*e];
                if !corners.contains(&a) {
                    corners.push(a);
                }
                if !corners.contains(&b) {
                    corners.push(b);
                }
            }
            for &c in &corners {
                if !inside(config, c) {
                    continue;
                }
                let incident: Vec<usize> = crossed
                    .iter()
                    .copied()
                    .filter(|e| {
                        let (a, b) = EDGE_ENDPOINTS[*e];
                        a == c || b == c
                    })
                    .collect();
                debug_assert_eq!(incident.len(), 2);
                pairs.push((incident[0], incident[1]));
            }
            debug_assert_eq!(pairs.len(), 2);
            pairs
        }
        n => unreachable!("face with {n} crossings"),
    }
}

fn midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGE_ENDPOINTS[e];
    let pa = CORNER_POS[a];
    let pb = CORNER_POS[b];
    [
        (pa[0] as f64 + pb[0] as f64) * 0.5,
        (pa[1] as f64 + pb[1] as f64) * 0.5,
        (pa[2] as f64 + pb[2] as f64) * 0.5,
    ]
}

fn build_case(config: u8) -> Vec<[u8; 3]> {
    if config == 0 || config == 0xff {
        return Vec::new();
    }
    // Each crossed edge accumulates exactly two pairings (one per incident
    // face); link them into cycles.
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face in 0..6 {
        for (a, b) in face_pairs(config, face) {
            links[a].push(b);
            links[b].push(a);
        }
    }
    let mut visited = [false; 12];
    let mut triangles = Vec::new();
    for start in 0..12 {
        if visited[start] || links[start].is_empty() {
            continue;
        }
        // Walk the cycle.
        let mut loop_edges = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = links[start][0];
        while cur != start {
            visited[cur] = true;
            loop_edges.push(cur);
            let next = if links[cur][0] == prev {
                links[cur][1]
            } else {
                links[cur][0]
            };
            prev = cur;
            cur = next;
        }
        // Orientation: Newell normal vs the inside-to-outside direction.
        let pts: Vec<[f64; 3]> = loop_edges.iter().map(|e| midpoint(*e)).collect();
        let mut normal = [0.0f64; 3];
        for i in 0..pts.len() {
            let p = pts[i];
            let q = pts[(i + 1) % pts.len()];
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut reference = [0.0f64; 3];
        for e in &loop_edges {
            let (a, b) = EDGE_ENDPOINTS[*e];
            let (from, to) = if inside(config, a) { (a, b) } else { (b, a) };
            for c in 0..3 {
                reference[c] += CORNER_POS[to][c] as f64 - CORNER_POS[from][c] as f64;
            }
        }
        let dot: f64 = (0..3).map(|c| normal[c] * reference[c]).sum();
        if dot < 0.0 {
            loop_edges.reverse();
        }
        for i in 1..loop_edges.len() - 1 {
            triangles.push([
                loop_edges[0] as u8,
                loop_edges[i] as u8,
                loop_edges[i + 1] as u8,
            ]);
        }
    }
    triangles
}

static TABLE: OnceLock<CaseTable> = OnceLock::new();

/// Triangle table for all 256 corner-sign configurations.
pub fn case_table() -> &'static CaseTable {
    TABLE.get_or_init(|| (0u16..256).map(|c| build_case(c as u8)).collect())
}
