/**
 * PDSK descriptor-stack files.
 *
 * Layout: magic "PDSK" (4 bytes), then five little-endian uint32s — version
 * (1), layer count L, grid rows Hp, grid cols Wp, channels c — then
 * L*Hp*Wp*c little-endian IEEE-754 float32 values in
 * [layer][row][col][channel] order.
 */

export const PDSK_MAGIC = 'PDSK';
export const PDSK_VERSION = 1; // version 1 = post-block transformer outputs
export const HEADER_BYTES = 24;

export interface DescriptorStack {
  layers: number;
  rows: number;
  cols: number;
  channels: number;
  /** length layers*rows*cols*channels, [layer][row][col][channel] order */
  data: Float32Array;
}

export function encodePdsk(stack: DescriptorStack): Buffer {
  const { layers, rows, cols, channels, data } = stack;
  const n = layers * rows * cols * channels;
  if (data.length !== n) {
    throw new Error(
      `stack data length ${data.length} != ${layers}x${rows}x${cols}x${channels}`,
    );
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * n);
  buf.write(PDSK_MAGIC, 0, 'ascii');
  buf.writeUInt32LE(PDSK_VERSION, 4);
  buf.writeUInt32LE(layers, 8);
  buf.writeUInt32LE(rows, 12);
  buf.writeUInt32LE(cols, 16);
  buf.writeUInt32LE(channels, 20);
  const view = new DataView(buf.buffer, buf.byteOffset + HEADER_BYTES, 4 * n);
  for (let i = 0; i < n; i++) {
    view.setFloat32(4 * i, data[i], true);
  }
  return buf;
}

export function decodePdsk(buf: Buffer): DescriptorStack {
  if (buf.length < HEADER_BYTES || buf.toString('ascii', 0, 4) !== PDSK_MAGIC) {
    throw new Error('not a PDSK descriptor stack');
  }
  const version = buf.readUInt32LE(4);
  if (version !== PDSK_VERSION) {
    throw new Error(`unsupported PDSK version ${version}`);
  }
  const layers = buf.readUInt32LE(8);
  const rows = buf.readUInt32LE(12);
  const cols = buf.readUInt32LE(16);
  const channels = buf.readUInt32LE(20);
  const n = layers * rows * cols * channels;
  if (buf.length !== HEADER_BYTES + 4 * n) {
    throw new Error(
      `file size ${buf.length} does not match header dims ` +
        `L=${layers} grid=${rows}x${cols} c=${channels}`,
    );
  }
  const data = new Float32Array(n);
  const view = new DataView(buf.buffer, buf.byteOffset + HEADER_BYTES, 4 * n);
  for (let i = 0; i < n; i++) {
    data[i] = view.getFloat32(4 * i, true);
  }
  return { layers, rows, cols, channels, data };
}
