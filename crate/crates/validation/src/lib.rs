//! Holds the `acceptance` test target, which checks the toolkit end to end
//! against the worked examples and the asymptotic claims.
