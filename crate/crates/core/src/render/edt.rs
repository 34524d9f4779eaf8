use super::Mask;

/// Per-pixel Euclidean distance (pixels) to the nearest occupied pixel.
/// Occupied pixels hold 0; an empty mask yields `f64::INFINITY` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct DtImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DtImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

// Large finite stand-in for "no site" so the parabola intersections stay finite.
const FAR: f64 = 1e20;

/// Lower envelope of parabolas; `f` holds squared distances along one line and
/// is overwritten with the 1D transform.
fn transform_line(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k == 0 always has z = -inf, so this never underflows
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    f.copy_from_slice(&out[..n]);
}

/// Exact Euclidean distance transform (separable lower-envelope algorithm:
/// a column pass followed by a row pass on squared distances).
pub fn distance_transform(mask: &Mask) -> DtImage {
    let (w, h) = (mask.width(), mask.height());
    if mask.is_empty() {
        return DtImage { width: w, height: h, data: vec![f64::INFINITY; w * h] };
    }
    let mut sq: Vec<f64> = mask.data().iter().map(|&v| if v != 0 { 0.0 } else { FAR }).collect();
    let n = w.max(h);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for x in 0..w {
        for y in 0..h {
            line[y] = sq[y * w + x];
        }
        transform_line(&mut line[..h], &mut v, &mut z, &mut out);
        for y in 0..h {
            sq[y * w + x] = line[y];
        }
    }
    for y in 0..h {
        let row = &mut sq[y * w..(y + 1) * w];
        transform_line(row, &mut v, &mut z, &mut out);
    }
    DtImage { width: w, height: h, data: sq.into_iter().map(f64::sqrt).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(mask: &Mask) -> Vec<f64> {
        let sites: Vec<(usize, usize)> = (0..mask.height())
            .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| mask.get(x, y) != 0)
            .collect();
        (0..mask.height())
            .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
            .map(|(x, y)| {
                sites
                    .iter()
                    .map(|&(sx, sy)| ((x as f64 - sx as f64).powi(2) + (y as f64 - sy as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_pixel() {
        let mut m = Mask::new(20, 20);
        m.set(10, 10, 1);
        let dt = distance_transform(&m);
        assert_eq!(dt.get(13, 14), 5.0);
        assert_eq!(dt.get(10, 10), 0.0);
    }

    #[test]
    fn full_and_empty() {
        let full = Mask::from_fn(7, 5, |_, _| 1);
        assert!(distance_transform(&full).data().iter().all(|&d| d == 0.0));
        let empty = Mask::new(7, 5);
        assert!(distance_transform(&empty).data().iter().all(|d| d.is_infinite()));
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..40, 1usize..40, 0.0f64..0.3, any::<u64>()).prop_map(|(w, h, density, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Mask::from_fn(w, h, |_, _| rng.gen_bool(density) as u8)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(mask in arb_mask()) {
            let dt = distance_transform(&mask);
            let oracle = brute_force(&mask);
            for (a, b) in dt.data().iter().zip(&oracle) {
                if b.is_infinite() {
                    prop_assert!(a.is_infinite());
                } else {
                    prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
                }
            }
        }

        #[test]
        fn is_lipschitz(mask in arb_mask()) {
            prop_assume!(!mask.is_empty());
            let dt = distance_transform(&mask);
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    if x + 1 < mask.width() {
                        prop_assert!((dt.get(x, y) - dt.get(x + 1, y)).abs() <= 1.0 + 1e-12);
                    }
                    if y + 1 < mask.height() {
                        prop_assert!((dt.get(x, y) - dt.get(x, y + 1)).abs() <= 1.0 + 1e-12);
                    }
                    if x + 1 < mask.width() && y + 1 < mask.height() {
                        prop_assert!((dt.get(x, y) - dt.get(x + 1, y + 1)).abs() <= std::f64::consts::SQRT_2 + 1e-12);
                    }
                }
            }
        }
    }
}
