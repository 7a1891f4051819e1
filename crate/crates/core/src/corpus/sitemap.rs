use quick_xml::events::Event;
use quick_xml::Reader;

use super::CorpusError;

/// Returns every `urlset/url/loc` value in document order.
///
/// Surrounding whitespace inside `<loc>` is trimmed; everything else is kept
/// verbatim (entities decoded).
pub fn parse_sitemap(xml_text: &str) -> Result<Vec<String>, CorpusError> {
    let mut reader = Reader::from_str(xml_text);
    let mut path: Vec<String> = Vec::new();
    let mut saw_root = false;
    let mut uris = Vec::new();
    let mut current_loc: Option<String> = None;

    let xml_err = |reader: &Reader<&[u8]>, message: String| CorpusError::Xml {
        offset: reader.error_position(),
        message,
    };

    loop {
        let event = reader
            .read_event()
            .map_err(|e| xml_err(&reader, e.to_string()))?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.local_name().as_ref()).into_owned();
                if path.is_empty() {
                    if saw_root {
                        return Err(CorpusError::Schema("multiple root elements".into()));
                    }
                    if name != "urlset" {
                        return Err(CorpusError::Schema(format!(
                            "expected <urlset> root, found <{name}>"
                        )));
                    }
                    saw_root = true;
                }
                if name == "loc" && path.len() == 2 && path[1] == "url" {
                    current_loc = Some(String::new());
                }
                path.push(name);
            }
            Event::Empty(e) => {
                let name = String::from_utf8_lossy(e.local_name().as_ref()).into_owned();
                if path.is_empty() {
                    if name == "urlset" && !saw_root {
                        saw_root = true;
                        continue;
                    }
                    return Err(CorpusError::Schema(format!(
                        "expected <urlset> root, found <{name}/>"
                    )));
                }
                if name == "loc" && path.len() == 2 && path[1] == "url" {
                    uris.push(String::new());
                }
            }
            Event::End(_) => {
                path.pop();
                if path.len() == 2 {
                    if let Some(loc) = current_loc.take() {
                        uris.push(loc.trim().to_string());
                    }
                }
            }
            Event::Text(t) => {
                if let Some(loc) = current_loc.as_mut() {
                    let text = t
                        .unescape()
                        .map_err(|e| xml_err(&reader, e.to_string()))?;
                    loc.push_str(&text);
                } else if path.is_empty() && !t.iter().all(u8::is_ascii_whitespace) {
                    return Err(xml_err(&reader, "text outside of root element".into()));
                }
            }
            Event::CData(c) => {
                if let Some(loc) = current_loc.as_mut() {
                    loc.push_str(&String::from_utf8_lossy(&c));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }

    if !path.is_empty() {
        return Err(CorpusError::Xml {
            offset: xml_text.len() as u64,
            message: format!("unexpected end of input inside <{}>", path.join("/")),
        });
    }
    if !saw_root {
        return Err(CorpusError::Schema("missing <urlset> root".into()));
    }
    Ok(uris)
}

/// Serializes uris as a minimal sitemap document.
pub fn write_sitemap(uris: &[String]) -> String {
    let mut out = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <urlset xmlns=\"http://www.sitemaps.org/schemas/sitemap/0.9\">\n",
    );
    for uri in uris {
        out.push_str("  <url><loc>");
        out.push_str(&quick_xml::escape::escape(uri.as_str()));
        out.push_str("</loc></url>\n");
    }
    out.push_str("</urlset>\n");
    out
}
