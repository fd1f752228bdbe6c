//! Windowed SSIM by direct enumeration, shared with the CLI acceptance target.

/// Direct per-voxel loop over the clipped 7^3 window.
pub fn ssim_brute(p: &[f64], t: &[f64], mask: &[bool], dims: [usize; 3]) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let mut total = 0.0;
    let mut n = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                let mut pairs = Vec::new();
                for zz in z.saturating_sub(3)..(z + 4).min(dims[2]) {
                    for yy in y.saturating_sub(3)..(y + 4).min(dims[1]) {
                        for xx in x.saturating_sub(3)..(x + 4).min(dims[0]) {
                            let j = idx(xx, yy, zz);
                            if mask[j] {
                                pairs.push((p[j], t[j]));
                            }
                        }
                    }
                }
                let k = pairs.len() as f64;
                let mx = pairs.iter().map(|a| a.0).sum::<f64>() / k;
                let my = pairs.iter().map(|a| a.1).sum::<f64>() / k;
                let vx = pairs.iter().map(|a| (a.0 - mx).powi(2)).sum::<f64>() / k;
                let vy = pairs.iter().map(|a| (a.1 - my).powi(2)).sum::<f64>() / k;
                let cxy = pairs.iter().map(|a| (a.0 - mx) * (a.1 - my)).sum::<f64>() / k;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}
