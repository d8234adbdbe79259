use crate::grid::Dims;

/// 6-connected components of a predicate over a grid. Component ids are
/// assigned in scan order of their first voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Component id per voxel, `u32::MAX` where the predicate is false.
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Whether any voxel of the component lies on the volume border.
    pub touches_border: Vec<bool>,
}

pub const NO_COMPONENT: u32 = u32::MAX;

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the smaller index as root so roots are first-in-scan-order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Union-find labelling of voxels where `inside` is true.
pub fn label_components(dims: Dims, inside: &[bool]) -> Components {
    let n = dims.len();
    let [nz, ny, nx] = dims.to_array();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = dims.index(z, y, x);
                if !inside[i] {
                    continue;
                }
                if x > 0 && inside[i - 1] {
                    union(&mut parent, i as u32, (i - 1) as u32);
                }
                if y > 0 && inside[i - nx] {
                    union(&mut parent, i as u32, (i - nx) as u32);
                }
                if z > 0 && inside[i - nx * ny] {
                    union(&mut parent, i as u32, (i - nx * ny) as u32);
                }
            }
        }
    }
    let mut labels = vec![NO_COMPONENT; n];
    let mut root_id = vec![NO_COMPONENT; n];
    let mut sizes = Vec::new();
    let mut touches_border = Vec::new();
    for i in 0..n {
        if !inside[i] {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        if root_id[r] == NO_COMPONENT {
            root_id[r] = sizes.len() as u32;
            sizes.push(0);
            touches_border.push(false);
        }
        let id = root_id[r];
        labels[i] = id;
        sizes[id as usize] += 1;
        if dims.is_border(dims.coords(i)) {
            touches_border[id as usize] = true;
        }
    }
    Components {
        labels,
        sizes,
        touches_border,
    }
}
