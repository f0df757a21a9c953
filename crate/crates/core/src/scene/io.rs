//! Line-oriented scene files. See `docs/formats.md` for the layout.

use std::fs;
use std::path::Path;

use super::Scene;
use crate::error::{Error, Result};
use crate::textio::{fmt_f64, Reader};

pub const SCENE_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "uniseg3d-scene";

pub fn write_scene(scene: &Scene) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("version {SCENE_FORMAT_VERSION}\n"));
    out.push_str(&format!("classes {}\n", scene.class_names.len()));
    for (name, stuff) in scene.class_names.iter().zip(&scene.stuff_flags) {
        out.push_str(&format!("{} {}\n", u8::from(*stuff), name));
    }
    out.push_str(&format!("points {}\n", scene.points.len()));
    for p in 0..scene.points.len() {
        let [x, y, z] = scene.points[p];
        let [r, g, b] = scene.colors[p];
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            fmt_f64(x),
            fmt_f64(y),
            fmt_f64(z),
            fmt_f64(r),
            fmt_f64(g),
            fmt_f64(b),
            scene.instance_id[p],
            scene.semantic_id[p],
            scene.superpoint_id[p],
        ));
    }
    out.push_str("end\n");
    out
}

pub fn read_scene(text: &str) -> Result<Scene> {
    let mut r = Reader::new(text);
    r.expect_line(MAGIC)?;
    let version: u32 = r.keyed("version")?;
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "scene",
            found: version,
            expected: SCENE_FORMAT_VERSION,
        });
    }
    let k: usize = r.keyed("classes")?;
    let mut class_names = Vec::with_capacity(k);
    let mut stuff_flags = Vec::with_capacity(k);
    for _ in 0..k {
        let (offset, line) = r.line()?;
        let (flag, name) = line.split_once(' ').ok_or_else(|| Error::Parse {
            offset,
            message: "expected `<stuff flag> <name>`".into(),
        })?;
        stuff_flags.push(match flag {
            "0" => false,
            "1" => true,
            _ => {
                return Err(Error::Parse {
                    offset,
                    message: format!("bad stuff flag {flag:?}"),
                })
            }
        });
        class_names.push(name.to_string());
    }
    let n: usize = r.keyed("points")?;
    let mut scene = Scene {
        points: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        instance_id: Vec::with_capacity(n),
        semantic_id: Vec::with_capacity(n),
        superpoint_id: Vec::with_capacity(n),
        class_names,
        stuff_flags,
    };
    for _ in 0..n {
        let mut f = r.fields(9)?;
        let x = [f.next_f64()?, f.next_f64()?, f.next_f64()?];
        let c = [f.next_f64()?, f.next_f64()?, f.next_f64()?];
        scene.points.push(x);
        scene.colors.push(c);
        scene.instance_id.push(f.next_parse()?);
        scene.semantic_id.push(f.next_parse()?);
        scene.superpoint_id.push(f.next_parse()?);
    }
    r.expect_line("end")?;
    r.expect_eof()?;
    scene.validate().map_err(|e| Error::Parse {
        offset: text.len(),
        message: e.to_string(),
    })?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, write_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    read_scene(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneRecipe};
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let scene = generate_scene(21, &SceneRecipe::default()).unwrap();
        let back = read_scene(&write_scene(&scene)).unwrap();
        assert_eq!(scene, back);
        assert!(scene
            .points
            .iter()
            .zip(&back.points)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = write_scene(&generate_scene(1, &SceneRecipe::default()).unwrap());
        let cut = &text[..text.len() / 2];
        match read_scene(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected_explicitly() {
        let text = write_scene(&generate_scene(1, &SceneRecipe::default()).unwrap()).replacen(
            "version 1",
            "version 7",
            1,
        );
        assert!(matches!(
            read_scene(&text),
            Err(Error::UnsupportedVersion { found: 7, .. })
        ));
    }

    #[test]
    fn garbage_number_reports_its_offset() {
        let text = "uniseg3d-scene\nversion 1\nclasses x\n";
        match read_scene(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 33),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
