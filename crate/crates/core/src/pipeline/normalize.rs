use crate::grid::MultiModalVolume;

/// Standard deviations at or below this leave the support at zero.
pub const STD_GUARD: f64 = 1e-8;

/// Per-modality z-score over nonzero voxels; zero voxels stay zero.
pub fn zscore_normalize(volume: &MultiModalVolume) -> MultiModalVolume {
    volume.map(|grid| {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in grid.data() {
            if v != 0.0 {
                n += 1;
                sum += v as f64;
            }
        }
        if n == 0 {
            return grid.clone();
        }
        let mean = sum / n as f64;
        let var = grid
            .data()
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        grid.map(|&v| {
            if v == 0.0 {
                0.0
            } else if std <= STD_GUARD {
                0.0
            } else {
                ((v as f64 - mean) / std) as f32
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, Spacing, VoxelGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(f: [&dyn Fn(usize, usize, usize) -> f32; 4]) -> MultiModalVolume {
        let d = Dims::cube(6);
        MultiModalVolume::new(f.map(|g| VoxelGrid::from_fn(d, Spacing::default(), g))).unwrap()
    }

    #[test]
    fn guards() {
        let v = volume([&|_, _, _| 0.0, &|z, _, _| if z < 3 { 5.0 } else { 0.0 }, &|_, _, _| 1.0, &|_, _, x| x as f32]);
        let n = zscore_normalize(&v);
        assert!(n.modality(0).data().iter().all(|&x| x == 0.0));
        assert!(n.modality(1).data().iter().all(|&x| x == 0.0));
        assert!(n.modality(2).data().iter().all(|&x| x == 0.0));
        assert!(n.modality(3).data().iter().zip(v.modality(3).data()).all(|(a, b)| (*b == 0.0) == (*a == 0.0) || *b != 0.0));
    }

    #[test]
    fn moments_on_random_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..216).map(|_| if rng.gen_bool(0.6) { rng.gen_range(10.0..500.0) } else { 0.0 }).collect();
        let f = |z: usize, y: usize, x: usize| vals[z * 36 + y * 6 + x];
        let v = volume([&f, &f, &f, &f]);
        let n = zscore_normalize(&v);
        for m in 0..4 {
            let sel: Vec<f64> = n.modality(m).data().iter().zip(v.modality(m).data()).filter(|(_, &o)| o != 0.0).map(|(&a, _)| a as f64).collect();
            let mean = sel.iter().sum::<f64>() / sel.len() as f64;
            let var = sel.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / sel.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-4);
            for (a, o) in n.modality(m).data().iter().zip(v.modality(m).data()) {
                if *o == 0.0 {
                    assert_eq!(*a, 0.0);
                }
            }
        }
    }
}
