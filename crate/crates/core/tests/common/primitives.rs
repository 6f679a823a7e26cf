use super::project;
use mhex_core::{Result, Tape, Var};

pub type Build = Box<dyn Fn(&mut Tape, &[Var], u64) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    /// keep inputs away from the relu kink
    pub shift_from_zero: bool,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var], u64) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        shift_from_zero: false,
    }
}

pub fn cases() -> Vec<Case> {
    let mut v = vec![
        case("matmul", &[&[4, 5], &[5, 3]], |t, x, s| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, s)
        }),
        case("transpose", &[&[3, 4]], |t, x, s| {
            let y = t.transpose(x[0])?;
            project(t, y, s)
        }),
        case("add", &[&[2, 3], &[2, 3]], |t, x, s| {
            let y = t.add(x[0], x[1])?;
            project(t, y, s)
        }),
        case("sub", &[&[2, 3], &[2, 3]], |t, x, s| {
            let y = t.sub(x[0], x[1])?;
            project(t, y, s)
        }),
        case("mul", &[&[2, 3], &[2, 3]], |t, x, s| {
            let y = t.mul(x[0], x[1])?;
            project(t, y, s)
        }),
        case("scale", &[&[5]], |t, x, s| {
            let y = t.scale(x[0], -1.7)?;
            project(t, y, s)
        }),
        case("sigmoid", &[&[6]], |t, x, s| {
            let y = t.sigmoid(x[0])?;
            project(t, y, s)
        }),
        case("sum_mean", &[&[2, 3]], |t, x, _| {
            let sq = t.mul(x[0], x[0])?;
            t.mean(sq)
        }),
        case("reshape", &[&[2, 3]], |t, x, s| {
            let y = t.reshape(x[0], [3, 2])?;
            project(t, y, s)
        }),
        case("conv2d_s1_p1", &[&[2, 5, 5], &[3, 2, 3, 3]], |t, x, s| {
            let y = t.conv2d(x[0], x[1], 1, 1)?;
            project(t, y, s)
        }),
        case("conv2d_s2_p0", &[&[2, 5, 5], &[2, 2, 3, 3]], |t, x, s| {
            let y = t.conv2d(x[0], x[1], 2, 0)?;
            project(t, y, s)
        }),
        case(
            "conv2d_batched",
            &[&[2, 2, 4, 4], &[3, 2, 3, 3]],
            |t, x, s| {
                let y = t.conv2d(x[0], x[1], 1, 1)?;
                project(t, y, s)
            },
        ),
        case("add_channel_bias", &[&[2, 3, 2, 2], &[3]], |t, x, s| {
            let y = t.add_channel_bias(x[0], x[1])?;
            project(t, y, s)
        }),
        case("add_row_bias", &[&[4, 3], &[3]], |t, x, s| {
            let y = t.add_row_bias(x[0], x[1])?;
            project(t, y, s)
        }),
        case(
            "scale_channels_batched",
            &[&[2, 3, 2, 2], &[2, 3]],
            |t, x, s| {
                let y = t.scale_channels(x[0], x[1])?;
                project(t, y, s)
            },
        ),
        case("scale_channels_single", &[&[3, 2, 2], &[3]], |t, x, s| {
            let y = t.scale_channels(x[0], x[1])?;
            project(t, y, s)
        }),
        case("scale_channels_tokens", &[&[4, 3], &[1, 3]], |t, x, s| {
            let y = t.scale_channels(x[0], x[1])?;
            project(t, y, s)
        }),
        case("global_avg_pool", &[&[2, 3, 3, 2]], |t, x, s| {
            let y = t.global_avg_pool(x[0])?;
            project(t, y, s)
        }),
        case("mean_rows", &[&[4, 3]], |t, x, s| {
            let y = t.mean_rows(x[0])?;
            project(t, y, s)
        }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, x, s| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-5)?;
            project(t, y, s)
        }),
        case("softmax_rows", &[&[3, 4]], |t, x, s| {
            let y = t.softmax_rows(x[0])?;
            project(t, y, s)
        }),
        case("softmax_cross_entropy", &[&[3, 4]], |t, x, _| {
            t.softmax_cross_entropy(x[0], &[0, 3, 1])
        }),
        case("nearest_resize", &[&[2, 2, 3]], |t, x, s| {
            let y = t.nearest_resize(x[0], 5, 4)?;
            project(t, y, s)
        }),
        case("avg_pool", &[&[2, 2, 4, 4]], |t, x, s| {
            let y = t.avg_pool(x[0], 2)?;
            project(t, y, s)
        }),
        case("pad_channels", &[&[2, 2, 2, 2]], |t, x, s| {
            let y = t.pad_channels(x[0], 4)?;
            project(t, y, s)
        }),
        case("broadcast_rows", &[&[3]], |t, x, s| {
            let y = t.broadcast_rows(x[0], 4)?;
            project(t, y, s)
        }),
        case("gather_rows", &[&[5, 3]], |t, x, s| {
            let y = t.gather_rows(x[0], &[4, 0, 4, 2])?;
            project(t, y, s)
        }),
        case("slice_concat_cols", &[&[3, 5], &[3, 2]], |t, x, s| {
            let a = t.slice_cols(x[0], 1, 3)?;
            let y = t.concat_cols(&[a, x[1]])?;
            project(t, y, s)
        }),
        case("concat_rows", &[&[2, 3], &[3]], |t, x, s| {
            let y = t.concat_rows(&[x[0], x[1]])?;
            project(t, y, s)
        }),
    ];
    let mut relu = case("relu", &[&[3, 4]], |t, x, s| {
        let y = t.relu(x[0])?;
        project(t, y, s)
    });
    relu.shift_from_zero = true;
    v.push(relu);
    v
}
