use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Horizontal flip followed by `quarter_turns` counter-clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Transform { flip: rng.gen_bool(0.5), quarter_turns: rng.gen_range(0..4) }
    }

    pub fn is_identity(self) -> bool {
        !self.flip && self.quarter_turns.is_multiple_of(4)
    }

    /// Source `(y, x)` read by output pixel `(oy, ox)` for an `h x w` input.
    pub fn source(self, oy: usize, ox: usize, h: usize, w: usize) -> (usize, usize) {
        // Undo the rotations one quarter turn at a time, tracking the
        // intermediate image size.
        let (mut y, mut x) = (oy, ox);
        let turns = self.quarter_turns % 4;
        let mut size = if turns % 2 == 1 { (w, h) } else { (h, w) };
        for _ in 0..turns {
            // Output of a CCW turn on a (hh, ww) image has size (ww, hh) and
            // out[i][j] = in[j][ww - 1 - i].
            let (oh, _) = size;
            let prev = (size.1, size.0);
            let (ny, nx) = (x, oh - 1 - y);
            y = ny;
            x = nx;
            size = prev;
        }
        if self.flip {
            x = w - 1 - x;
        }
        (y, x)
    }

    pub fn output_shape(self, s: Shape) -> Shape {
        if self.quarter_turns % 2 == 1 {
            Shape::new(s.n, s.c, s.w, s.h)
        } else {
            s
        }
    }

    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        if self.is_identity() {
            return t.clone();
        }
        let s = t.shape();
        let o = self.output_shape(s);
        let mut out = Tensor::zeros(o);
        let src = t.data();
        let dst = out.data_mut();
        for oy in 0..o.h {
            for ox in 0..o.w {
                let (y, x) = self.source(oy, ox, s.h, s.w);
                for p in 0..s.n * s.c {
                    dst[p * o.plane() + oy * o.w + ox] = src[p * s.plane() + y * s.w + x];
                }
            }
        }
        out
    }
}

/// Applies one random transform to both tensors of a training pair.
pub fn augment<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, g: &Tensor<T>, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    let t = Transform::draw(rng);
    (t.apply(x), t.apply(g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_image(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| (y * w + x) as f64)
    }

    #[test]
    fn one_turn_is_counter_clockwise() {
        // [[0 1 2] [3 4 5]] turned CCW is [[2 5] [1 4] [0 3]].
        let t = Transform { flip: false, quarter_turns: 1 }.apply(&index_image(2, 3));
        assert_eq!(t.shape(), Shape::new(1, 1, 3, 2));
        assert_eq!(t.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn four_turns_and_double_flip_are_identity() {
        let img = index_image(3, 5);
        let turn = Transform { flip: false, quarter_turns: 1 };
        let mut t = img.clone();
        for _ in 0..4 {
            t = turn.apply(&t);
        }
        assert_eq!(t.data(), img.data());
        let flip = Transform { flip: true, quarter_turns: 0 };
        assert_eq!(flip.apply(&flip.apply(&img)).data(), img.data());
    }
}
