"""Conforming 2D simplicial meshes with newest-vertex-bisection refinement.

A mesh is immutable once built; ``refine`` and ``uniform_refine`` return new
meshes and record a parent map so that discrete functions can be transferred
exactly onto refined meshes.
"""

import numpy as np

# local edge k is the edge opposite local vertex k
TRI_EDGES = ((1, 2), (2, 0), (0, 1))


class Mesh:
    """Conforming triangulation with full face topology.

    Attributes
    ----------
    vertices : (nv, 2) float
    elements : (ne, 3) int
        Counterclockwise vertex triples.
    face_vertices : (nf, 2) int
        Vertex pair per face, lower index first.
    face_elems : (nf, 2) int
        Adjacent elements; second entry is -1 for boundary faces.  For
        interior faces the lower element index comes first.
    face_local : (nf, 2) int
        Local edge index of the face within each adjacent element.
    face_normal : (nf, 2) float
        Unit normal, outward from ``face_elems[:, 0]`` (hence outward from
        the domain on boundary faces).
    face_tangent : (nf, 2) float
        Unit tangent from ``face_vertices[:, 0]`` to ``face_vertices[:, 1]``.
    boundary : (nf,) bool
    h_face : (nf,) float
        Face length.
    elem_faces : (ne, 3) int
        Face id of each local edge.
    ref_edge : (ne,) int
        Local index of the refinement edge used by bisection.
    parent : (ne,) int
        Element index in the mesh this element was refined from, -1 for
        meshes built directly from arrays.
    """

    def __init__(self, vertices, elements, ref_edge, parent):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        self.ref_edge = np.ascontiguousarray(ref_edge, dtype=np.int64)
        self.parent = np.ascontiguousarray(parent, dtype=np.int64)
        self._build_topology()

    # -- construction ----------------------------------------------------

    def _build_topology(self):
        ne = self.n_elements
        face_index = {}
        face_vertices = []
        face_elems = []
        face_local = []
        elem_faces = np.empty((ne, 3), dtype=np.int64)
        for e in range(ne):
            tri = self.elements[e]
            for k, (a, b) in enumerate(TRI_EDGES):
                key = (int(tri[a]), int(tri[b]))
                if key[0] > key[1]:
                    key = (key[1], key[0])
                f = face_index.get(key)
                if f is None:
                    f = len(face_vertices)
                    face_index[key] = f
                    face_vertices.append(key)
                    face_elems.append([e, -1])
                    face_local.append([k, -1])
                else:
                    if face_elems[f][1] != -1:
                        raise ValueError(
                            "non-conforming mesh: edge %s shared by more "
                            "than two elements" % (key,))
                    face_elems[f][1] = e
                    face_local[f][1] = k
                elem_faces[e, k] = f
        self.face_vertices = np.asarray(face_vertices, dtype=np.int64)
        self.face_elems = np.asarray(face_elems, dtype=np.int64)
        self.face_local = np.asarray(face_local, dtype=np.int64)
        self.elem_faces = elem_faces
        self.boundary = self.face_elems[:, 1] == -1

        # keep the lower element index on side 0 of interior faces
        flip = (~self.boundary) & (self.face_elems[:, 0] > self.face_elems[:, 1])
        self.face_elems[flip] = self.face_elems[flip][:, ::-1]
        self.face_local[flip] = self.face_local[flip][:, ::-1]

        va = self.vertices[self.face_vertices[:, 0]]
        vb = self.vertices[self.face_vertices[:, 1]]
        tv = vb - va
        self.h_face = np.linalg.norm(tv, axis=1)
        if np.any(self.h_face <= 0):
            raise ValueError("degenerate face of zero length")
        self.face_tangent = tv / self.h_face[:, None]
        normal = np.stack([self.face_tangent[:, 1], -self.face_tangent[:, 0]], axis=1)
        # orient outward from side-0 element
        cent0 = self.vertices[self.elements[self.face_elems[:, 0]]].mean(axis=1)
        midf = 0.5 * (va + vb)
        wrong = np.einsum("fi,fi->f", normal, midf - cent0) < 0
        normal[wrong] *= -1.0
        self.face_normal = normal

        p0 = self.vertices[self.elements[:, 0]]
        p1 = self.vertices[self.elements[:, 1]]
        p2 = self.vertices[self.elements[:, 2]]
        d1, d2 = p1 - p0, p2 - p0
        self.areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(self.areas <= 0):
            raise ValueError("element with non-positive orientation or zero area")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_faces(self):
        return len(self.face_vertices)

    def element_edges(self, e):
        """Vertex pairs of the three edges of element ``e``."""
        tri = self.elements[e]
        return [(int(tri[a]), int(tri[b])) for a, b in TRI_EDGES]


def build_mesh(vertices, triangles):
    """Build a validated mesh from vertex coordinates and vertex triples.

    Rejects zero-area or misoriented triangles and non-conforming input
    (edges shared by more than two elements, hanging vertices).  Refinement
    edges are assigned to the longest edge of each element.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise ValueError("vertices must be an (nv, 2) array")
    if not np.all(np.isfinite(vertices)):
        raise ValueError("vertex coordinates must be finite")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise ValueError("triangles must be an (ne, 3) array")
    if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(vertices):
        raise ValueError("triangle vertex index out of range")

    ref_edge = _longest_edges(vertices, triangles)
    parent = np.full(len(triangles), -1, dtype=np.int64)
    mesh = Mesh(vertices, triangles, ref_edge, parent)
    _check_hanging_vertices(mesh)
    return mesh


def _longest_edges(vertices, triangles):
    lengths = np.empty((len(triangles), 3))
    for k, (a, b) in enumerate(TRI_EDGES):
        d = vertices[triangles[:, b]] - vertices[triangles[:, a]]
        lengths[:, k] = np.einsum("ei,ei->e", d, d)
    return np.argmax(lengths, axis=1).astype(np.int64)


def _check_hanging_vertices(mesh, rtol=1e-12):
    """Reject vertices lying strictly inside a face segment."""
    verts = mesh.vertices
    va = verts[mesh.face_vertices[:, 0]]
    tv = verts[mesh.face_vertices[:, 1]] - va
    L2 = np.einsum("fi,fi->f", tv, tv)
    chunk = max(1, 2_000_000 // max(1, mesh.n_faces))
    for start in range(0, mesh.n_vertices, chunk):
        block = verts[start:start + chunk]  # (m, 2)
        d = block[:, None, :] - va[None, :, :]  # (m, nf, 2)
        cross = d[:, :, 0] * tv[None, :, 1] - d[:, :, 1] * tv[None, :, 0]
        proj = np.einsum("mfi,fi->mf", d, tv) / L2[None, :]
        tol = rtol * np.sqrt(L2)[None, :]
        on_line = np.abs(cross) <= tol * np.sqrt(L2)[None, :]
        inside = (proj > rtol) & (proj < 1.0 - rtol)
        bad = on_line & inside
        # endpoints of the face are legitimately on the line
        if bad.any():
            m, f = np.nonzero(bad)
            v = start + m[0]
            if v not in mesh.face_vertices[f[0]]:
                raise ValueError(
                    "non-conforming mesh: vertex %d hangs on face %d" % (v, f[0]))
            # same coordinates as a face endpoint: duplicate vertex
            raise ValueError(
                "non-conforming mesh: duplicate vertex coordinates at index %d" % v)


def mesh_sizes(mesh):
    """Element sizes h_K = |K|^(1/2), face lengths and shape regularity.

    Shape regularity is max over elements of diam(K) / rho_K with rho_K the
    inscribed-circle diameter; the minimum value sqrt(3) is attained by
    equilateral triangles.
    """
    h_elem = np.sqrt(mesh.areas)
    edge = np.empty((mesh.n_elements, 3))
    for k, (a, b) in enumerate(TRI_EDGES):
        d = mesh.vertices[mesh.elements[:, b]] - mesh.vertices[mesh.elements[:, a]]
        edge[:, k] = np.linalg.norm(d, axis=1)
    diam = edge.max(axis=1)
    # inradius r = area / semiperimeter, inscribed diameter rho = 2r
    rho = 2.0 * mesh.areas / (0.5 * edge.sum(axis=1))
    theta = float(np.max(diam / rho))
    return MeshSizes(h_elem, mesh.h_face.copy(), theta)


class MeshSizes:
    def __init__(self, h_elem, h_face, shape_regularity):
        self.h_elem = h_elem
        self.h_face = h_face
        self.shape_regularity = shape_regularity


def refine(mesh, marked):
    """Bisect the marked elements, applying conformity closure.

    Newest-vertex bisection: every marked element is bisected at its
    refinement edge at least once; closure marks further refinement edges
    until no element has a split edge without its refinement edge split.
    """
    marked = np.asarray(list(marked), dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise ValueError("marked element index out of range")

    split = np.zeros(mesh.n_faces, dtype=bool)
    split[mesh.elem_faces[marked, mesh.ref_edge[marked]]] = True
    ar = np.arange(mesh.n_elements)
    ref_faces = mesh.elem_faces[ar, mesh.ref_edge]
    while True:
        need = split[mesh.elem_faces].any(axis=1) & ~split[ref_faces]
        if not need.any():
            break
        split[ref_faces[need]] = True
    return _bisect(mesh, split)


def uniform_refine(mesh):
    """Split every edge: each element becomes four children, h_K halves."""
    return _bisect(mesh, np.ones(mesh.n_faces, dtype=bool))


def _bisect(mesh, split):
    """Bisection core.  ``split`` must be closed under the NVB rule."""
    nv = mesh.n_vertices
    split_ids = np.nonzero(split)[0]
    mid_of_face = np.full(mesh.n_faces, -1, dtype=np.int64)
    mid_of_face[split_ids] = nv + np.arange(len(split_ids))
    midpoints = 0.5 * (mesh.vertices[mesh.face_vertices[split_ids, 0]]
                       + mesh.vertices[mesh.face_vertices[split_ids, 1]])
    new_vertices = np.vstack([mesh.vertices, midpoints])

    elements = mesh.elements.tolist()
    elem_faces = mesh.elem_faces.tolist()
    ref_edge = mesh.ref_edge.tolist()
    mid = mid_of_face.tolist()

    out_tri = []
    out_ref = []
    out_parent = []

    def emit(tri, r, parent):
        out_tri.append(tri)
        out_ref.append(r)
        out_parent.append(parent)

    def bisect_once(tri, r, z):
        """Children of (t0,t1,t2) with base opposite vertex r split at z."""
        t0, t1, t2 = tri[r], tri[(r + 1) % 3], tri[(r + 2) % 3]
        # newest vertex z; each child's refinement edge is opposite z
        return ((t0, t1, z), 2), ((t0, z, t2), 1)

    for e in range(mesh.n_elements):
        faces = elem_faces[e]
        k = ref_edge[e]
        z = mid[faces[k]]
        if z < 0:
            if mid[faces[0]] >= 0 or mid[faces[1]] >= 0 or mid[faces[2]] >= 0:
                raise AssertionError("closure violated at element %d" % e)
            emit(tuple(elements[e]), k, e)
            continue
        tri = elements[e]
        (tri_a, ra), (tri_b, rb) = bisect_once(tri, k, z)
        # child refinement edges are the parent's other two original edges
        for child, r, face in ((tri_a, ra, faces[(k + 2) % 3]),
                               (tri_b, rb, faces[(k + 1) % 3])):
            m = mid[face]
            if m < 0:
                emit(child, r, e)
            else:
                (g1, r1), (g2, r2) = bisect_once(child, r, m)
                emit(g1, r1, e)
                emit(g2, r2, e)

    return Mesh(new_vertices, np.asarray(out_tri, dtype=np.int64),
                np.asarray(out_ref, dtype=np.int64),
                np.asarray(out_parent, dtype=np.int64))


def audit_conformity(mesh):
    """Face-adjacency audit used by the test-suite after refinements."""
    for f in range(mesh.n_faces):
        e0, e1 = mesh.face_elems[f]
        assert e0 >= 0
        if mesh.boundary[f]:
            assert e1 == -1
        else:
            assert e1 >= 0 and e0 < e1
        for side, e in enumerate((e0, e1)):
            if e < 0:
                continue
            k = mesh.face_local[f, side]
            a, b = TRI_EDGES[k]
            pair = sorted((mesh.elements[e, a], mesh.elements[e, b]))
            assert tuple(pair) == tuple(mesh.face_vertices[f])
    _check_hanging_vertices(mesh)
    return True


def write_mesh(mesh, path):
    """Plain-text export: header `nv ne`, vertices `x y`, elements `i j k`.

    Floats are written with repr so the round trip is bit exact.
    """
    with open(path, "w") as fh:
        fh.write("%d %d\n" % (mesh.n_vertices, mesh.n_elements))
        for x, y in mesh.vertices:
            fh.write("%r %r\n" % (float(x), float(y)))
        for i, j, k in mesh.elements:
            fh.write("%d %d %d\n" % (i, j, k))


def read_mesh(path):
    with open(path) as fh:
        nv, ne = map(int, fh.readline().split())
        vertices = np.array([[float(t) for t in fh.readline().split()]
                             for _ in range(nv)])
        triangles = np.array([[int(t) for t in fh.readline().split()]
                              for _ in range(ne)], dtype=np.int64)
    return build_mesh(vertices, triangles)
