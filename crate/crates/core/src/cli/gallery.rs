//! Static HTML gallery of sampled records. Images are inlined so the page
//! can be moved without the shard.

use std::fmt::Write as _;
use std::path::Path;

use base64::Engine;

use crate::dataset::DatasetShard;
use crate::seed;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;background:#f4f4f4}\
.rec{background:#fff;margin:0 0 2em;padding:1em;border:1px solid #ccc}\
.img{position:relative;display:inline-block;max-width:100%}\
.img img{max-width:100%;display:block}\
.pt{position:absolute;width:10px;height:10px;margin:-5px 0 0 -5px;border-radius:50%;background:#f0f;border:2px solid #000}\
details pre{max-height:30em;overflow:auto;background:#fafafa}\
.meta{color:#555;font-size:90%}";

pub fn render_page(shard: &DatasetShard, sample: usize, seed_value: u64) -> Result<String, String> {
    let n = shard.records.len();
    let k = sample.min(n);
    let mut picked = rand::seq::index::sample(&mut seed::rng(seed_value), n, k).into_vec();
    picked.sort_unstable();

    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>codesynth gallery</title><style>{STYLE}</style></head><body>\n\
         <h1>{k} of {n} records</h1>\n"
    );
    for i in picked {
        let r = &shard.records[i];
        let bytes = std::fs::read(shard.image_path(r)).map_err(|e| format!("{}: {e}", r.image))?;
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        let _ = write!(
            html,
            "<div class=\"rec\"><h2>{}</h2><p class=\"meta\">{} / {} / {} / {}x{}</p><p><b>Topic:</b> {}</p>\n\
             <div class=\"img\"><img src=\"data:image/png;base64,{data}\">",
            escape(&r.id),
            r.category,
            escape(&r.pipeline_id),
            r.tool,
            r.width,
            r.height,
            escape(&r.topic),
        );
        for ann in &r.points {
            for p in &ann.points {
                let _ = write!(
                    html,
                    "<span class=\"pt\" style=\"left:{:.2}%;top:{:.2}%\"></span>",
                    p[0], p[1]
                );
            }
        }
        html.push_str("</div>\n");
        if !r.qa.is_empty() {
            html.push_str("<ol>");
            for t in &r.qa {
                let _ = write!(
                    html,
                    "<li><b>Q:</b> {}<br><b>A:</b> {}<br><small>{}</small></li>",
                    escape(&t.question),
                    escape(&t.answer),
                    escape(&t.explanation)
                );
            }
            html.push_str("</ol>\n");
        }
        for ann in &r.points {
            let _ = write!(html, "<p><b>Point:</b> {}</p>\n", escape(&ann.question));
        }
        let _ = write!(
            html,
            "<details><summary>persona and code</summary><p>{}</p><pre>{}</pre></details></div>\n",
            escape(&r.persona),
            escape(&r.code)
        );
    }
    html.push_str("</body></html>\n");
    Ok(html)
}

pub fn cmd_gallery(dir: &Path, out: &Path, sample: usize, seed_value: u64) -> Result<(), String> {
    let shard = DatasetShard::open(dir).map_err(|e| e.to_string())?;
    let page = render_page(&shard, sample, seed_value)?;
    std::fs::write(out, page).map_err(|e| format!("{}: {e}", out.display()))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::escape;

    #[test]
    fn escapes_markup() {
        assert_eq!(
            escape("<a href=\"x\">&'"),
            "&lt;a href=&quot;x&quot;&gt;&amp;&#39;"
        );
    }
}
