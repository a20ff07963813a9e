use super::fmap::Fmap;
use crate::error::{Error, Result};

/// 2x2 max-pool with stride 2. Returns the pooled map and, per output
/// element, the flat input index that won.
pub fn maxpool2(x: &Fmap) -> Result<(Fmap, Vec<usize>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {}x{} map", x.h, x.w)));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Fmap::zeros(x.c, x.b, oh, ow);
    let mut arg = vec![0usize; out.data.len()];
    let mut o = 0;
    for c in 0..x.c {
        for b in 0..x.b {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = x.idx(c, b, 2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.idx(c, b, 2 * y + dy, 2 * xx + dx);
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    out.data[o] = x.data[best];
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(dy: &Fmap, arg: &[usize], input_like: &Fmap) -> Fmap {
    let mut dx = input_like.zeros_like();
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_maxima() {
        let x = Fmap::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = maxpool2_backward(&Fmap::from_vec(1, 1, 1, 2, vec![1.0, 2.0]), &arg, &x);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn odd_size_rejected() {
        assert!(maxpool2(&Fmap::zeros(1, 1, 3, 4)).is_err());
    }
}
