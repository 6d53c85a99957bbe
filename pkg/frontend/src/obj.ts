/** Minimal OBJ parsing into vertices and unique wireframe edges. */

export interface WireMesh {
  vertices: Float64Array; // x0 y0 z0 x1 y1 z1 ...
  edges: Uint32Array;     // a0 b0 a1 b1 ... unique undirected pairs
  isPointCloud: boolean;
}

export function parseObj(text: string): WireMesh {
  const verts: number[] = [];
  const edgeSet = new Set<number>();
  let vertexCount = 0;
  const key = (a: number, b: number) =>
    a < b ? a * 0x100000 + b : b * 0x100000 + a;
  for (const rawLine of text.split("\n")) {
    const line = rawLine.trim();
    if (line.startsWith("v ")) {
      const parts = line.slice(2).trim().split(/\s+/).map(Number);
      verts.push(parts[0], parts[1], parts[2]); // ignore optional vertex color
      vertexCount++;
    } else if (line.startsWith("f ")) {
      const idx = line
        .slice(2)
        .trim()
        .split(/\s+/)
        .map((tok) => parseInt(tok.split("/")[0], 10) - 1);
      for (let i = 0; i < idx.length; i++) {
        const a = idx[i];
        const b = idx[(i + 1) % idx.length];
        if (a < 0 || b < 0 || a >= vertexCount || b >= vertexCount) {
          throw new Error(`face index out of range in: ${line}`);
        }
        edgeSet.add(key(a, b));
      }
    }
  }
  const edges = new Uint32Array(edgeSet.size * 2);
  let i = 0;
  for (const k of edgeSet) {
    edges[i++] = Math.floor(k / 0x100000);
    edges[i++] = k % 0x100000;
  }
  return {
    vertices: new Float64Array(verts),
    edges,
    isPointCloud: edgeSet.size === 0 && vertexCount > 0,
  };
}
