/** Binary PGM (P5) decoder for the daemon's /frame payload. */

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array; // row-major, one byte per pixel
}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0d, 0x0b, 0x0c]);
const HASH = 0x23;
const NEWLINE = 0x0a;

export function decodePgm(buffer: ArrayBuffer | Uint8Array): GrayImage {
  const data = buffer instanceof Uint8Array ? buffer : new Uint8Array(buffer);
  if (data.length < 2 || data[0] !== 0x50 || data[1] !== 0x35) {
    throw new Error("not a binary PGM: magic is not P5");
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < data.length && (WHITESPACE.has(data[pos]) || data[pos] === HASH)) {
      if (data[pos] === HASH) {
        while (pos < data.length && data[pos] !== NEWLINE) pos++;
      }
      pos++;
    }
    const start = pos;
    while (pos < data.length && !WHITESPACE.has(data[pos]) && data[pos] !== HASH) pos++;
    if (pos === start) throw new Error("truncated PGM header");
    const token = new TextDecoder().decode(data.subarray(start, pos));
    const value = Number(token);
    if (!Number.isInteger(value)) throw new Error(`non-numeric header field "${token}"`);
    fields.push(value);
  }
  const [width, height, maxval] = fields;
  if (width < 1 || height < 1) throw new Error(`invalid dimensions ${width}x${height}`);
  if (maxval < 1 || maxval > 255) throw new Error(`unsupported maxval ${maxval}`);
  if (pos >= data.length || !WHITESPACE.has(data[pos])) {
    throw new Error("missing whitespace between header and raster");
  }
  pos++;
  const expected = width * height;
  const payload = data.subarray(pos);
  if (payload.length < expected) {
    throw new Error(`raster truncated: expected ${expected} bytes, found ${payload.length}`);
  }
  return { width, height, pixels: payload.slice(0, expected) };
}

/** Expand grayscale to the RGBA layout ImageData wants. */
export function toRgba(image: GrayImage): Uint8ClampedArray {
  const out = new Uint8ClampedArray(image.width * image.height * 4);
  for (let i = 0; i < image.pixels.length; i++) {
    const v = image.pixels[i];
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}
