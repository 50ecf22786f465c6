"""Ride-pooling fleet simulation with meeting points.

Library layout:
    network   road/walking graphs, meeting points, geodesics
    spcache   partitioned exact shortest-path cache
    domain    requests, vehicles, stops, constraints, metrics
    assign    rectangular Hungarian + maximum-cardinality matching
    stars     greedy insertion scheduler (per request and batched)
    ilp       RV/RTV graphs, group-TSP travel(), exact assignment solve
    engine    discrete-time simulation loop
    demand    trip CSV ingestion and synthetic demand
    report    metric report emission and figures
    cli       command line entry point
"""

__version__ = "0.1.0"
