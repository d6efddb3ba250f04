use rand::Rng;
use uniavatar_core::rng::stream;
use uniavatar_render::blur::{kernel_1d, kernel_2d, sigma};
use uniavatar_render::geometry::{blend, normalized_coords, rotation_matrix, apply};
use uniavatar_render::model::{synthesize_model, Vec3};
use uniavatar_render::raster::{rasterize_gbuffer, shade_gbuffer};
use uniavatar_render::*;

fn random_model(seed: u64, vertices: usize) -> FaceModel {
    let spec = SyntheticModelSpec {
        vertices,
        shape_dims: 3,
        expr_dims: 3,
    };
    synthesize_model(spec, &mut stream(seed, "model", 0)).unwrap()
}

fn random_lighting<R: Rng>(rng: &mut R) -> Lighting {
    Lighting(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
}

fn random_params<R: Rng>(model: &FaceModel, rng: &mut R) -> FaceParams {
    FaceParams {
        pose: std::array::from_fn(|_| rng.random_range(-0.4..0.4)),
        shape: (0..model.shape_dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
        expression: (0..model.expr_dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
        camera: Camera {
            scale: rng.random_range(0.8..1.2),
            tx: rng.random_range(-0.1..0.1),
            ty: rng.random_range(-0.1..0.1),
        },
        lighting: random_lighting(rng),
    }
}

// Written out independently of the library's basis table.
fn oracle_basis(n: Vec3) -> [f64; 9] {
    let (x, y, z) = (n[0], n[1], n[2]);
    let mut h = [0.0; 9];
    h[0] = 0.282095;
    h[1] = 0.488603 * y;
    h[2] = 0.488603 * z;
    h[3] = 0.488603 * x;
    h[4] = 1.092548 * x * y;
    h[5] = 1.092548 * y * z;
    h[6] = 0.315392 * (3.0 * z * z - 1.0);
    h[7] = 1.092548 * x * z;
    h[8] = 0.546274 * (x * x - y * y);
    h
}

#[test]
fn sh_closed_forms() {
    assert_eq!(
        sh_basis([0.0, 0.0, 1.0]).unwrap(),
        [0.282095, 0.0, 0.488603, 0.0, 0.0, 0.0, 0.630784, 0.0, 0.0]
    );
    assert_eq!(
        sh_basis([1.0, 0.0, 0.0]).unwrap(),
        [0.282095, 0.0, 0.0, 0.488603, 0.0, 0.0, -0.315392, 0.0, 0.546274]
    );
    let mut rng = stream(1, "normals", 0);
    for _ in 0..100 {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert_eq!(sh_basis(v.map(|c| c / l)).unwrap()[0], 0.282095);
    }
}

#[test]
fn shade_single_terms() {
    assert_eq!(
        shade([0.3, 0.6, 0.9], [0.0, 1.0, 0.0], &Lighting::ZERO).unwrap(),
        [0.0; 3]
    );
    let amb = shade([0.5; 3], [0.6, 0.0, 0.8], &Lighting::ambient(1.0)).unwrap();
    for c in amb {
        assert!((c - 0.1410475).abs() < 1e-15);
    }
    let mut l = Lighting::ZERO;
    l.0[2] = [1.0; 3];
    assert_eq!(shade([1.0; 3], [0.0, 0.0, 1.0], &l).unwrap(), [0.488603; 3]);
}

#[test]
fn shade_is_linear_in_lighting() {
    let mut rng = stream(2, "lin", 0);
    for _ in 0..200 {
        let a: Vec3 = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let n = v.map(|c| c / l);
        let (i1, i2) = (random_lighting(&mut rng), random_lighting(&mut rng));
        let sum = shade(a, n, &i1.add(&i2)).unwrap();
        let s1 = shade(a, n, &i1).unwrap();
        let s2 = shade(a, n, &i2).unwrap();
        for c in 0..3 {
            assert!((sum[c] - s1[c] - s2[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn full_image_shading_matches_brute_force() {
    for scene in 0..20 {
        let model = random_model(scene, 100);
        let mut rng = stream(scene, "scene", 0);
        let params = random_params(&model, &mut rng);
        let out = render_face(&model, &params, &params.lighting, 64, 64).unwrap();
        assert!(out.coverage.any());
        let g = &out.gbuffer;
        for y in 0..64 {
            for x in 0..64 {
                let k = y * 64 + x;
                let expect = if out.coverage.get(y, x) {
                    let h = oracle_basis(g.normal[k]);
                    std::array::from_fn(|c| {
                        let mut s = 0.0;
                        for t in 0..9 {
                            s += params.lighting.0[t][c] * h[t];
                        }
                        g.albedo[k][c] * s
                    })
                } else {
                    [0.0; 3]
                };
                let got = out.radiance.get(y, x);
                for c in 0..3 {
                    assert!((got[c] - expect[c]).abs() <= 1e-12, "scene {scene} ({y},{x})");
                    assert_eq!(out.image.get(y, x)[c], got[c].clamp(0.0, 1.0));
                }
            }
        }
        assert!(out
            .depth
            .iter()
            .zip(out.coverage.data())
            .all(|(d, &c)| !c || d.is_finite()));
    }
}

#[test]
fn zero_coefficients_give_template() {
    let model = random_model(3, 64);
    let geo = synthesize_geometry(&model, &[0.0; 3], &[0.0; 3], [0.0; 3]).unwrap();
    assert_eq!(geo.vertices, model.template);

    let geo = synthesize_geometry(&model, &[1.0, 0.0, 0.0], &[0.0; 3], [0.0; 3]).unwrap();
    for (v, (t, out)) in model.template.iter().zip(&geo.vertices).enumerate() {
        for a in 0..3 {
            assert_eq!(out[a], t[a] + model.shape_basis[(v * 3 + a) * 3]);
        }
    }
    assert!(synthesize_geometry(&model, &[0.0; 2], &[0.0; 3], [0.0; 3]).is_err());
    assert!(blend(&model, &[0.0; 3], &[0.0; 4]).is_err());
}

#[test]
fn normals_are_unit() {
    let model = random_model(4, 12);
    assert_eq!(model.num_vertices(), 12);
    let mut rng = stream(4, "params", 0);
    for _ in 0..50 {
        let p = random_params(&model, &mut rng);
        let geo = synthesize_geometry(&model, &p.shape, &p.expression, p.pose).unwrap();
        for n in geo.normals {
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((l - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn projection_linearity() {
    let v = [0.3, -0.2, 0.5];
    let id = normalized_coords(v, &Camera::IDENTITY);
    assert_eq!(id, [0.3, -0.2]);
    let shifted = normalized_coords(v, &Camera { scale: 1.0, tx: 0.5, ty: 0.0 });
    assert!((shifted[0] - id[0] - 0.5).abs() < 1e-15);
    let cam = Camera { scale: 0.7, tx: 0.1, ty: -0.3 };
    let a = normalized_coords(v, &cam);
    let b = normalized_coords(v, &Camera { scale: 1.4, ..cam });
    assert_eq!([a[0] * 2.0, a[1] * 2.0], b);
    let p = project_orthographic(&[v], &Camera::IDENTITY, 64, 64);
    assert_eq!(p.pixels[0], [(0.3 + 1.0) * 0.5 * 64.0 - 0.5, (1.0 + 0.2) * 0.5 * 64.0 - 0.5]);
    assert_eq!(p.depth[0], -0.5);
}

fn flat_scene(pixels: Vec<[f64; 2]>, depth: Vec<f64>) -> Projected {
    Projected { pixels, depth }
}

#[test]
fn coverage_matches_point_in_triangle() {
    let p = flat_scene(vec![[1.0, 1.0], [6.0, 1.0], [1.0, 6.0]], vec![0.0; 3]);
    let n = [[0.0, 0.0, 1.0]; 3];
    for tri in [[0u32, 1, 2], [0, 2, 1]] {
        let scene = Scene {
            projected: &p,
            triangles: &[tri],
            normals: &n,
            albedo: &n,
        };
        let out = rasterize(&scene, &Lighting::ambient(1.0), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = x >= 1 && y >= 1 && x + y <= 7;
                assert_eq!(out.coverage.get(y, x), inside, "({y},{x})");
            }
        }
        assert_eq!(out.coverage.count(), 21);
    }
}

#[test]
fn nearer_triangle_wins() {
    let p = flat_scene(
        vec![[0.0, 0.0], [7.0, 0.0], [0.0, 7.0], [1.0, 1.0], [7.0, 1.0], [1.0, 7.0]],
        vec![0.7, 0.7, 0.7, 0.2, 0.2, 0.2],
    );
    let n = [[0.0, 0.0, 1.0]; 6];
    let albedo = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
    let scene = Scene {
        projected: &p,
        triangles: &[[0, 1, 2], [3, 4, 5]],
        normals: &n,
        albedo: &albedo,
    };
    let g = rasterize_gbuffer(&scene, 8, 8, 1).unwrap();
    assert_eq!(g.triangle[2 * 8 + 2], Some(1));
    let a = g.albedo[2 * 8 + 2];
    assert!(a[0].abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
    assert!((g.depth[2 * 8 + 2] - 0.2).abs() < 1e-12);
    assert_eq!(g.triangle[0], Some(0));

    // equal depth keeps the lower index regardless of draw order
    let p = flat_scene(vec![[0.0, 0.0], [7.0, 0.0], [0.0, 7.0]], vec![0.5; 3]);
    let scene = Scene {
        projected: &p,
        triangles: &[[0, 1, 2], [0, 2, 1]],
        normals: &n[..3],
        albedo: &albedo[..3],
    };
    let g = rasterize_gbuffer(&scene, 8, 8, 1).unwrap();
    assert!(g.triangle.iter().flatten().all(|&t| t == 0));
}

#[test]
fn rasterizer_is_deterministic_across_threads() {
    let model = random_model(5, 300);
    let params = random_params(&model, &mut stream(5, "p", 0));
    let geo = synthesize_geometry(&model, &params.shape, &params.expression, params.pose).unwrap();
    let proj = project_orthographic(&geo.vertices, &params.camera, 61, 64);
    let scene = Scene {
        projected: &proj,
        triangles: &model.triangles,
        normals: &geo.normals,
        albedo: &model.albedo,
    };
    let serial = shade_gbuffer(&rasterize_gbuffer(&scene, 61, 64, 1).unwrap(), &params.lighting);
    for threads in [2, 3, 8] {
        let par = shade_gbuffer(&rasterize_gbuffer(&scene, 61, 64, threads).unwrap(), &params.lighting);
        assert!(par.image.bit_eq(&serial.image));
        assert_eq!(par.gbuffer.triangle, serial.gbuffer.triangle);
    }
    let again = render_face(&model, &params, &params.lighting, 61, 64).unwrap();
    assert!(again.image.bit_eq(&serial.image));
}

#[test]
fn in_plane_rotation_commutes_with_rendering() {
    let model = random_model(6, 400);
    let size = 96;
    let mut worst: f64 = 1.0;
    for (i, angle) in [0.3f64, 0.9, -1.2, 2.5].into_iter().enumerate() {
        let mut rng = stream(6, "rot", i as u64);
        let mut base = random_params(&model, &mut rng);
        base.pose = [0.0; 3];
        base.camera.scale = 0.8;
        let rotated = FaceParams {
            pose: [0.0, 0.0, angle],
            camera: {
                let r = rotation_matrix([0.0, 0.0, angle]);
                let t = apply(&r, [base.camera.tx, base.camera.ty, 0.0]);
                Camera { tx: t[0], ty: t[1], ..base.camera }
            },
            ..base.clone()
        };
        let a = render_face(&model, &base, &Lighting::ambient(1.0), size, size).unwrap();
        let b = render_face(&model, &rotated, &Lighting::ambient(1.0), size, size).unwrap();
        // pull back every pixel of b through the inverse rotation
        let (s, c) = angle.sin_cos();
        let mut agree = 0;
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
                let v = 1.0 - (y as f64 + 0.5) / size as f64 * 2.0;
                let (u0, v0) = (c * u + s * v, -s * u + c * v);
                let sx = ((u0 + 1.0) * 0.5 * size as f64 - 0.5).round();
                let sy = ((1.0 - v0) * 0.5 * size as f64 - 0.5).round();
                let src = sx >= 0.0
                    && sy >= 0.0
                    && sx < size as f64
                    && sy < size as f64
                    && a.coverage.get(sy as usize, sx as usize);
                if src == b.coverage.get(y, x) {
                    agree += 1;
                }
            }
        }
        worst = worst.min(agree as f64 / (size * size) as f64);
    }
    assert!(worst >= 0.99, "mask agreement {worst}");
}

#[test]
fn blur_kernel_properties() {
    assert_eq!(sigma(15), 5.0);
    let k = kernel_2d(15).unwrap();
    assert_eq!(k.len(), 31 * 31);
    assert!(k.iter().all(|&v| v > 0.0));
    assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    let g = kernel_1d(15).unwrap();
    // independent check of the Gaussian shape: ratio of neighbouring taps
    for i in 0..30 {
        let (a, b) = ((i as f64) - 15.0, (i as f64) - 14.0);
        let want = ((a * a - b * b) / (2.0 * 25.0)).exp();
        assert!((g[i + 1] / g[i] - want).abs() < 1e-12);
    }
}

#[test]
fn blur_impulse_and_constant() {
    let r = 15;
    let mut img = Image::new(64, 64);
    img.set(32, 30, [1.0, 2.0, 0.5]);
    let out = gaussian_blur(&img, r).unwrap();
    let k = kernel_2d(r).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let (dy, dx) = (y as i64 - 32, x as i64 - 30);
            let w = if dy.abs() <= 15 && dx.abs() <= 15 {
                k[((dy + 15) * 31 + dx + 15) as usize]
            } else {
                0.0
            };
            let got = out.get(y, x);
            for (c, s) in [1.0, 2.0, 0.5].into_iter().enumerate() {
                assert!((got[c] - w * s).abs() < 1e-15, "({y},{x})");
            }
        }
    }
    let flat = Image::filled(20, 13, [0.3, 0.7, 0.1]);
    for r in [1, 4, 15] {
        let out = gaussian_blur(&flat, r).unwrap();
        for (a, b) in out.data().iter().zip(flat.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
