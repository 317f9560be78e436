//! Scene descriptions and their captions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectColor {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    White,
    Lightgray,
    Beige,
    Mint,
    Black,
    Darkgray,
    Navy,
    Maroon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

/// Cell of the 3×3 placement grid, row-major from the top left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Topleft,
    Top,
    Topright,
    Left,
    Center,
    Right,
    Bottomleft,
    Bottom,
    Bottomright,
}

/// Background palette family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Light,
    Dark,
}

macro_rules! named {
    ($ty:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$(<$ty>::$v),*];

            pub fn name(self) -> &'static str {
                match self { $(<$ty>::$v => $s),* }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

named!(Style { Light => "light", Dark => "dark" });
named!(ShapeKind { Circle => "circle", Square => "square", Triangle => "triangle" });
named!(ObjectColor {
    Red => "red", Green => "green", Blue => "blue", Yellow => "yellow",
    Cyan => "cyan", Magenta => "magenta", Orange => "orange", Purple => "purple",
});
named!(Background {
    White => "white", Lightgray => "lightgray", Beige => "beige", Mint => "mint",
    Black => "black", Darkgray => "darkgray", Navy => "navy", Maroon => "maroon",
});
named!(SizeClass { Small => "small", Medium => "medium", Large => "large" });
named!(Cell {
    Topleft => "topleft", Top => "top", Topright => "topright",
    Left => "left", Center => "center", Right => "right",
    Bottomleft => "bottomleft", Bottom => "bottom", Bottomright => "bottomright",
});

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s).ok_or_else(|| Error::Invalid(format!("unknown style '{s}' (light, dark)")))
    }
}

impl ObjectColor {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.90, 0.10, 0.10],
            Self::Green => [0.10, 0.75, 0.20],
            Self::Blue => [0.15, 0.25, 0.90],
            Self::Yellow => [0.95, 0.85, 0.10],
            Self::Cyan => [0.10, 0.80, 0.85],
            Self::Magenta => [0.85, 0.15, 0.80],
            Self::Orange => [0.95, 0.55, 0.10],
            Self::Purple => [0.50, 0.20, 0.70],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::White => [1.0, 1.0, 1.0],
            Self::Lightgray => [0.80, 0.80, 0.80],
            Self::Beige => [0.93, 0.87, 0.73],
            Self::Mint => [0.75, 0.93, 0.82],
            Self::Black => [0.0, 0.0, 0.0],
            Self::Darkgray => [0.25, 0.25, 0.25],
            Self::Navy => [0.05, 0.08, 0.35],
            Self::Maroon => [0.40, 0.05, 0.10],
        }
    }

    pub fn style(self) -> Style {
        if self.index() < 4 {
            Style::Light
        } else {
            Style::Dark
        }
    }

    pub fn of_style(style: Style) -> &'static [Background] {
        match style {
            Style::Light => &Self::ALL[..4],
            Style::Dark => &Self::ALL[4..],
        }
    }
}

impl SizeClass {
    /// Nominal radius at 128 px resolution.
    pub fn radius(self) -> f64 {
        match self {
            Self::Small => 10.0,
            Self::Medium => 15.0,
            Self::Large => 21.0,
        }
    }
}

impl Cell {
    /// Center in unit coordinates, `(x, y)`.
    pub fn center(self) -> (f64, f64) {
        let i = self.index();
        (((i % 3) as f64 + 0.5) / 3.0, ((i / 3) as f64 + 0.5) / 3.0)
    }
}

/// One shape. Offsets are in pixels at 128 px resolution and scale with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: ShapeKind,
    pub color: ObjectColor,
    pub size: SizeClass,
    pub cell: Cell,
    #[serde(default)]
    pub dx: f64,
    #[serde(default)]
    pub dy: f64,
    #[serde(default = "one")]
    pub size_jitter: f64,
}

fn one() -> f64 {
    1.0
}

impl Primitive {
    pub fn new(shape: ShapeKind, color: ObjectColor, size: SizeClass, cell: Cell) -> Self {
        Self { shape, color, size, cell, dx: 0.0, dy: 0.0, size_jitter: 1.0 }
    }

    /// Center and radius in pixels at `resolution`.
    pub fn geometry(&self, resolution: usize) -> (f64, f64, f64) {
        let s = resolution as f64 / 128.0;
        let (ux, uy) = self.cell.center();
        (
            ux * resolution as f64 + self.dx * s,
            uy * resolution as f64 + self.dy * s,
            self.size.radius() * self.size_jitter * s,
        )
    }
}

/// Up to three primitives drawn back to front over a background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: Background,
}

pub const MAX_PRIMITIVES: usize = 3;
const MAX_SHIFT: f64 = 6.0;
const MAX_SIZE_JITTER: f64 = 0.1;

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, background: Background) -> Result<Self> {
        let s = Self { primitives, background };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.len() > MAX_PRIMITIVES {
            return Err(Error::Invalid(format!("{} primitives, at most {MAX_PRIMITIVES}", self.primitives.len())));
        }
        for p in &self.primitives {
            if p.geometry(128).2 < 8.0 {
                return Err(Error::Invalid("primitive radius below 8 px".into()));
            }
        }
        Ok(())
    }

    /// Random scene with 1 to 3 primitives in distinct cells.
    pub fn random(rng: &mut impl Rng, style: Style) -> Self {
        let n = rng.random_range(1..=MAX_PRIMITIVES);
        let mut cells = Cell::ALL.to_vec();
        cells.shuffle(rng);
        let primitives = cells[..n]
            .iter()
            .map(|&cell| Primitive {
                shape: *pick(rng, ShapeKind::ALL),
                color: *pick(rng, ObjectColor::ALL),
                size: *pick(rng, SizeClass::ALL),
                cell,
                dx: rng.random_range(-MAX_SHIFT..MAX_SHIFT),
                dy: rng.random_range(-MAX_SHIFT..MAX_SHIFT),
                size_jitter: 1.0 + rng.random_range(-MAX_SIZE_JITTER..MAX_SIZE_JITTER),
            })
            .collect();
        Self { primitives, background: *pick(rng, Background::of_style(style)) }
    }

    /// `"<size> <color> <shape> <cell>"` per primitive joined by `and`,
    /// then `"on <background>"`. At most 16 words.
    pub fn caption(&self) -> String {
        let mut parts: Vec<String> = self
            .primitives
            .iter()
            .map(|p| format!("{} {} {} {}", p.size.name(), p.color.name(), p.shape.name(), p.cell.name()))
            .collect();
        if parts.is_empty() {
            parts.push("empty".into());
        }
        format!("{} on {}", parts.join(" and "), self.background.name())
    }

    /// Inverse of [`caption`](Self::caption), without position and size jitter.
    pub fn parse_caption(caption: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unparseable caption {caption:?}"));
        let (objects, bg) = caption.rsplit_once(" on ").ok_or_else(bad)?;
        let background = Background::from_name(bg.trim()).ok_or_else(bad)?;
        let mut primitives = Vec::new();
        if objects.trim() != "empty" {
            for obj in objects.split(" and ") {
                let w: Vec<&str> = obj.split_whitespace().collect();
                let [size, color, shape, cell] = w[..] else { return Err(bad()) };
                primitives.push(Primitive::new(
                    ShapeKind::from_name(shape).ok_or_else(bad)?,
                    ObjectColor::from_name(color).ok_or_else(bad)?,
                    SizeClass::from_name(size).ok_or_else(bad)?,
                    Cell::from_name(cell).ok_or_else(bad)?,
                ));
            }
        }
        Self::new(primitives, background)
    }

    /// Copy with jitter removed.
    pub fn canonical(&self) -> Self {
        Self {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive::new(p.shape, p.color, p.size, p.cell))
                .collect(),
            background: self.background,
        }
    }
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}
