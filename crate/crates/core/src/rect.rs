use serde::{Deserialize, Serialize};

/// Inclusive integer rectangle in the pixel frame of one feature map.
///
/// Coordinates may be negative or exceed the map while a region is being
/// back-traced; [`Rect::clamp`] brings it back inside and reports the overhang.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: i64,
    pub left: i64,
    pub bottom: i64,
    pub right: i64,
}

/// Border widths, in pixels, in the order top, left, bottom, right.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Margins {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Margins {
    pub fn is_zero(&self) -> bool {
        *self == Margins::default()
    }
}

impl Rect {
    pub const fn new(top: i64, left: i64, bottom: i64, right: i64) -> Self {
        Rect {
            top,
            left,
            bottom,
            right,
        }
    }

    pub const fn pixel(row: i64, col: i64) -> Self {
        Rect::new(row, col, row, col)
    }

    /// The rect covering a whole `height × width` map.
    pub fn full(height: usize, width: usize) -> Self {
        Rect::new(0, 0, height as i64 - 1, width as i64 - 1)
    }

    pub fn height(&self) -> i64 {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> i64 {
        self.right - self.left + 1
    }

    pub fn is_valid(&self) -> bool {
        self.top <= self.bottom && self.left <= self.right
    }

    /// Pixel count; zero for inverted rects.
    pub fn area(&self) -> u64 {
        if self.is_valid() {
            (self.height() * self.width()) as u64
        } else {
            0
        }
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && self.bottom >= other.bottom
            && self.right >= other.right
    }

    pub fn contains_point(&self, row: i64, col: i64) -> bool {
        row >= self.top && row <= self.bottom && col >= self.left && col <= self.right
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.top.max(other.top),
            self.left.max(other.left),
            self.bottom.min(other.bottom),
            self.right.min(other.right),
        );
        r.is_valid().then_some(r)
    }

    /// Smallest rect covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.top.min(other.top),
            self.left.min(other.left),
            self.bottom.max(other.bottom),
            self.right.max(other.right),
        )
    }

    pub fn translate(&self, drow: i64, dcol: i64) -> Rect {
        Rect::new(
            self.top + drow,
            self.left + dcol,
            self.bottom + drow,
            self.right + dcol,
        )
    }

    /// Expresses `self` relative to the top-left corner of `origin`.
    pub fn relative_to(&self, origin: &Rect) -> Rect {
        self.translate(-origin.top, -origin.left)
    }

    /// Intersects with `[0, height-1] × [0, width-1]` and returns the clipped
    /// overhang per border. `None` when nothing of the rect is inside.
    pub fn clamp(&self, height: usize, width: usize) -> Option<(Rect, Margins)> {
        let clamped = self.intersect(&Rect::full(height, width))?;
        let margins = Margins {
            top: (clamped.top - self.top) as usize,
            left: (clamped.left - self.left) as usize,
            bottom: (self.bottom - clamped.bottom) as usize,
            right: (self.right - clamped.right) as usize,
        };
        Some((clamped, margins))
    }
}

impl std::fmt::Display for Rect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}..={}]x[{}..={}]",
            self.top, self.bottom, self.left, self.right
        )
    }
}
