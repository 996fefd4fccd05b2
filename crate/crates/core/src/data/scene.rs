use serde::{Deserialize, Serialize};
use tapegrad::Tensor;

macro_rules! vocab_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

vocab_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
vocab_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
vocab_enum!(Size { Small => "small", Large => "large" });
vocab_enum!(Position { Left => "left", Right => "right", Top => "top", Bottom => "bottom", Center => "center" });
vocab_enum!(Background { Dark => "dark", Light => "light" });

/// Number of distinct scenes.
pub const SCENE_COUNT: usize = 4 * 4 * 2 * 5 * 2;

/// Gray level of the dark background; the light one is its complement.
const DARK: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub position: Position,
    pub background: Background,
}

impl SceneSpec {
    /// Dense index in `0..SCENE_COUNT`.
    pub fn index(&self) -> usize {
        (((self.shape.index() * 4 + self.color.index()) * 2 + self.size.index()) * 5 + self.position.index()) * 2
            + self.background.index()
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < SCENE_COUNT, "scene index {i} out of range");
        let background = Background::ALL[i % 2];
        let i = i / 2;
        let position = Position::ALL[i % 5];
        let i = i / 5;
        let size = Size::ALL[i % 2];
        let i = i / 2;
        let color = Color::ALL[i % 4];
        let shape = Shape::ALL[i / 4];
        Self {
            shape,
            color,
            size,
            position,
            background,
        }
    }

    /// Zero-shot class: one of the 16 shape × color combinations.
    pub fn class(&self) -> usize {
        self.shape.index() * 4 + self.color.index()
    }

    pub fn all() -> impl Iterator<Item = SceneSpec> {
        (0..SCENE_COUNT).map(Self::from_index)
    }

    /// True when pixel center `(x, y)` lies inside the shape.
    pub fn covers(&self, image_size: usize, x: usize, y: usize) -> bool {
        let s = image_size as f32;
        let (cx, cy) = match self.position {
            Position::Left => (s / 4.0, s / 2.0),
            Position::Right => (3.0 * s / 4.0, s / 2.0),
            Position::Top => (s / 2.0, s / 4.0),
            Position::Bottom => (s / 2.0, 3.0 * s / 4.0),
            Position::Center => (s / 2.0, s / 2.0),
        };
        let r = match self.size {
            Size::Small => s / 8.0,
            Size::Large => 3.0 * s / 16.0,
        };
        let dx = x as f32 + 0.5 - cx;
        let dy = y as f32 + 0.5 - cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
        }
    }

    fn rgb(&self) -> [f32; 3] {
        match self.color {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    fn background_level(&self) -> f32 {
        match self.background {
            Background::Dark => DARK,
            Background::Light => 1.0 - DARK,
        }
    }

    /// Writes the `size×size×3` rendering into `out`.
    pub fn render_into(&self, image_size: usize, out: &mut Vec<f32>) {
        let bg = self.background_level();
        let fg = self.rgb();
        for y in 0..image_size {
            for x in 0..image_size {
                if self.covers(image_size, x, y) {
                    out.extend_from_slice(&fg);
                } else {
                    out.extend_from_slice(&[bg; 3]);
                }
            }
        }
    }
}

/// Rasterizes a scene: flat background, one hard-edged filled shape.
pub fn render_scene(spec: &SceneSpec, image_size: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(image_size * image_size * 3);
    spec.render_into(image_size, &mut data);
    Tensor::new(&[image_size, image_size, 3], data).expect("rendered size")
}
