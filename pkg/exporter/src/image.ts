/**
 * Image loading and resizing for the exporter: PNG and JPEG in, planar
 * float RGB out.
 */

import * as fs from 'node:fs';
import * as path from 'node:path';
import { PNG } from 'pngjs';
import jpeg from 'jpeg-js';

export interface RgbImage {
  width: number;
  height: number;
  /** height*width*3, row-major, RGB interleaved, values in [0, 1] */
  data: Float32Array;
}

function fromRgba(width: number, height: number, rgba: Uint8Array): RgbImage {
  const data = new Float32Array(width * height * 3);
  for (let i = 0, j = 0; i < width * height; i++, j += 4) {
    data[3 * i] = rgba[j] / 255;
    data[3 * i + 1] = rgba[j + 1] / 255;
    data[3 * i + 2] = rgba[j + 2] / 255;
  }
  return { width, height, data };
}

export function decodeImage(filePath: string): RgbImage {
  let raw: Buffer;
  try {
    raw = fs.readFileSync(filePath);
  } catch (err) {
    throw new Error(`cannot read image ${filePath}: ${(err as Error).message}`);
  }
  const ext = path.extname(filePath).toLowerCase();
  try {
    if (ext === '.png' || raw.subarray(1, 4).toString('ascii') === 'PNG') {
      const png = PNG.sync.read(raw);
      return fromRgba(png.width, png.height, png.data);
    }
    if (ext === '.jpg' || ext === '.jpeg' || (raw[0] === 0xff && raw[1] === 0xd8)) {
      const img = jpeg.decode(raw, { useTArray: true, maxMemoryUsageInMB: 1024 });
      return fromRgba(img.width, img.height, img.data);
    }
  } catch (err) {
    throw new Error(`unreadable image ${filePath}: ${(err as Error).message}`);
  }
  throw new Error(`unreadable image ${filePath}: unsupported format`);
}

/**
 * Bilinear resample with half-pixel-centered sampling and edge clamping —
 * source coordinate x_src = (x_dst + 0.5) * (w_src / w_dst) - 0.5.
 */
export function resizeBilinear(
  img: RgbImage,
  outWidth: number,
  outHeight: number,
): RgbImage {
  if (img.width === outWidth && img.height === outHeight) {
    return { width: outWidth, height: outHeight, data: img.data.slice() };
  }
  const out = new Float32Array(outWidth * outHeight * 3);
  const sx = img.width / outWidth;
  const sy = img.height / outHeight;
  for (let y = 0; y < outHeight; y++) {
    const fy = Math.min(Math.max((y + 0.5) * sy - 0.5, 0), img.height - 1);
    const y0 = Math.floor(fy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = fy - y0;
    for (let x = 0; x < outWidth; x++) {
      const fx = Math.min(Math.max((x + 0.5) * sx - 0.5, 0), img.width - 1);
      const x0 = Math.floor(fx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = fx - x0;
      for (let ch = 0; ch < 3; ch++) {
        const p00 = img.data[3 * (y0 * img.width + x0) + ch];
        const p01 = img.data[3 * (y0 * img.width + x1) + ch];
        const p10 = img.data[3 * (y1 * img.width + x0) + ch];
        const p11 = img.data[3 * (y1 * img.width + x1) + ch];
        const top = p00 + (p01 - p00) * wx;
        const bottom = p10 + (p11 - p10) * wx;
        out[3 * (y * outWidth + x) + ch] = top + (bottom - top) * wy;
      }
    }
  }
  return { width: outWidth, height: outHeight, data: out };
}
