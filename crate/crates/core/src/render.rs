//! Silhouette and grayscale rasterization of the simulated body.
//!
//! Images are row-major with row 0 at the top of the view. A pixel is covered
//! by a link when its centre lies inside the link's oriented rectangle; there
//! is no anti-aliasing.

use serde::{Deserialize, Serialize};

use crate::physics::{LinkPose, SimState, Simulator};

/// Gray level of link `i` in rendered frames: `230 - 25 i`, floored at 40.
pub fn link_intensity(link: usize) -> u8 {
    230usize.saturating_sub(25 * link).max(40) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Camera {
    pub center_x: f64,
    pub center_y: f64,
    pub view_width: f64,
    pub view_height: f64,
    /// Output rows.
    pub height: usize,
    /// Output columns.
    pub width: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self { center_x: 0.0, center_y: 0.9, view_width: 3.0, view_height: 3.0, height: 64, width: 64 }
    }
}

impl Camera {
    /// Same camera re-centred horizontally on the torso.
    pub fn follow(&self, state: &SimState) -> Camera {
        Camera { center_x: state.root_pos[0], ..self.clone() }
    }

    pub fn is_valid(&self) -> bool {
        self.height > 0
            && self.width > 0
            && self.view_width > 0.0
            && self.view_height > 0.0
            && self.center_x.is_finite()
            && self.center_y.is_finite()
    }

    fn pixel_size(&self) -> (f64, f64) {
        (self.view_width / self.width as f64, self.view_height / self.height as f64)
    }

    fn left(&self) -> f64 {
        self.center_x - 0.5 * self.view_width
    }

    fn top(&self) -> f64 {
        self.center_y + 0.5 * self.view_height
    }

    /// World coordinates of the centre of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let (px, py) = self.pixel_size();
        [self.left() + (col as f64 + 0.5) * px, self.top() - (row as f64 + 0.5) * py]
    }
}

/// Binary silhouette; `data[r * width + c]` is 1 for agent pixels, 0 otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub index: usize,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { width, height, data: vec![0; width * height], index: 0 }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
    pub index: usize,
}

impl Frame {
    pub fn black(height: usize, width: usize) -> Self {
        Self { width, height, data: vec![0; width * height], index: 0 }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    /// Zeroes every pixel outside `mask`.
    pub fn masked(&self, mask: &Mask) -> Frame {
        let data = self.data.iter().zip(&mask.data).map(|(&v, &m)| if m != 0 { v } else { 0 }).collect();
        Frame { data, ..self.clone() }
    }
}

/// Visits every pixel whose centre lies inside `pose`, in row-major order.
fn for_each_covered(pose: &LinkPose, cam: &Camera, mut visit: impl FnMut(usize)) {
    let (px, py) = cam.pixel_size();
    let xs = pose.corners().map(|c| c[0]);
    let ys = pose.corners().map(|c| c[1]);
    let min_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // conservative pixel ranges; the exact test below decides coverage
    let col_lo = ((min_x - cam.left()) / px - 1.0).floor().max(0.0);
    let col_hi = ((max_x - cam.left()) / px + 1.0).ceil().min(cam.width as f64);
    let row_lo = ((cam.top() - max_y) / py - 1.0).floor().max(0.0);
    let row_hi = ((cam.top() - min_y) / py + 1.0).ceil().min(cam.height as f64);
    if col_lo >= col_hi || row_lo >= row_hi {
        return;
    }
    let (s, c) = pose.angle.sin_cos();
    let [hx, hy] = pose.half_extents;
    for row in row_lo as usize..row_hi as usize {
        for col in col_lo as usize..col_hi as usize {
            let p = cam.pixel_center(row, col);
            let dx = p[0] - pose.center[0];
            let dy = p[1] - pose.center[1];
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            if lx.abs() <= hx && ly.abs() <= hy {
                visit(row * cam.width + col);
            }
        }
    }
}

/// Silhouette of a set of link rectangles.
pub fn rasterize_mask(poses: &[LinkPose], cam: &Camera) -> Mask {
    let mut mask = Mask::empty(cam.height, cam.width);
    for pose in poses {
        for_each_covered(pose, cam, |i| mask.data[i] = 1);
    }
    mask
}

/// Grayscale rendering; where links overlap the one earlier in `poses` is visible.
pub fn rasterize_frame(poses: &[LinkPose], cam: &Camera) -> Frame {
    let mut frame = Frame::black(cam.height, cam.width);
    for (link, pose) in poses.iter().enumerate().rev() {
        let shade = link_intensity(link);
        for_each_covered(pose, cam, |i| frame.data[i] = shade);
    }
    frame
}

pub fn render_mask(sim: &Simulator, state: &SimState, cam: &Camera) -> Mask {
    rasterize_mask(&sim.link_poses(state), cam)
}

pub fn render_frame(sim: &Simulator, state: &SimState, cam: &Camera) -> Frame {
    rasterize_frame(&sim.link_poses(state), cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{MorphologySpec, SimConfig};

    fn unit_square(center: [f64; 2], angle: f64) -> LinkPose {
        LinkPose { center, angle, half_extents: [0.5, 0.5] }
    }

    fn cam2x2() -> Camera {
        Camera { center_x: 0.0, center_y: 0.0, view_width: 2.0, view_height: 2.0, height: 64, width: 64 }
    }

    #[test]
    fn unit_square_covers_centered_block() {
        let mask = rasterize_mask(&[unit_square([0.0, 0.0], 0.0)], &cam2x2());
        assert_eq!(mask.count(), 32 * 32);
        for r in 0..64 {
            for c in 0..64 {
                let inside = (16..48).contains(&r) && (16..48).contains(&c);
                assert_eq!(mask.get(r, c) == 1, inside, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn out_of_view_is_empty() {
        let mask = rasterize_mask(&[unit_square([10.0, 0.0], 0.3)], &cam2x2());
        assert_eq!(mask.count(), 0);
        let frame = rasterize_frame(&[unit_square([0.0, -5.0], 0.0)], &cam2x2());
        assert!(frame.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn rotated_square_area_is_close() {
        let mask = rasterize_mask(&[unit_square([0.1, -0.05], 0.7)], &cam2x2());
        // area 1 m^2 at 32 px/m; boundary error bounded by perimeter * pixel size
        let expected = 1024.0;
        let bound = 4.0 * 32.0;
        assert!((mask.count() as f64 - expected).abs() <= bound, "count {}", mask.count());
    }

    #[test]
    fn earlier_link_wins_overlap() {
        let a = unit_square([0.0, 0.0], 0.0);
        let b = unit_square([0.25, 0.0], 0.0);
        let frame = rasterize_frame(&[a, b], &cam2x2());
        // pixel inside both squares takes link 0's shade
        let shared = frame.get(32, 36);
        assert_eq!(shared, link_intensity(0));
        let only_b = frame.get(32, 50);
        assert_eq!(only_b, link_intensity(1));
        let swapped = rasterize_frame(&[b, a], &cam2x2());
        assert_eq!(swapped.get(32, 36), link_intensity(0));
        assert_eq!(swapped.get(32, 20), link_intensity(1));
    }

    #[test]
    fn follow_camera_semantics() {
        let sim = Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap();
        let cam = Camera::default();
        let mut s = sim.reset(0);
        assert_eq!(cam.follow(&s), cam);
        s.root_pos[0] = 5.0;
        let followed = cam.follow(&s);
        assert_eq!(followed.center_x, 5.0);
        assert_eq!(followed.follow(&s), followed);
        assert_eq!(followed.view_width, cam.view_width);
    }

    #[test]
    fn frame_support_equals_mask() {
        let sim = Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap();
        let mut s = sim.reset(3);
        s.joint_angles = vec![0.6, -1.0, 0.3, -0.4, -0.2, -0.5];
        let cam = Camera::default().follow(&s);
        let mask = render_mask(&sim, &s, &cam);
        let frame = render_frame(&sim, &s, &cam);
        assert!(mask.count() > 50);
        for (m, f) in mask.data.iter().zip(&frame.data) {
            assert_eq!(*m == 1, *f > 0);
        }
    }
}
