"""Brute-force reference implementations shared by unit and acceptance tests."""


def retrieval_oracle(d, q, g, max_rank):
    """AP and CMC by walking each ranked list by hand (ties by gallery index)."""
    aps, firsts = [], []
    for i in range(len(q)):
        order = sorted(range(len(g)), key=lambda j: (d[i][j], j))
        hits, precs, first = 0, [], None
        for rank, j in enumerate(order, 1):
            if g[j] == q[i]:
                hits += 1
                precs.append(hits / rank)
                first = rank if first is None else first
        aps.append(sum(precs) / len(precs))
        firsts.append(first)
    cmc = [sum(f <= k for f in firsts) / len(firsts) for k in range(1, max_rank + 1)]
    return aps, cmc


def random_instance(rng, max_gallery=6):
    """Small retrieval problem with coarse (tie-prone) distances."""
    ng, nq = int(rng.integers(1, max_gallery + 1)), int(rng.integers(1, 5))
    g = rng.integers(0, 3, ng).tolist()
    q = rng.choice(g, nq).tolist()
    d = rng.integers(0, 4, (nq, ng)).astype(float)
    return d, q, g
